#include "hsprobe/probes.hpp"

#include "hsprobe/activation.hpp"
#include "hsprobe/error.hpp"
#include "hsprobe/kernels.hpp"
#include "probe_internal.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace hsprobe {

namespace detail {

double bce_from_logit(double logit, double label) noexcept {
    return -(label * log_sigmoid(logit) + (1.0 - label) * log_sigmoid(-logit));
}

namespace {

LinearOffsets linear_at(const ProbeParams& params, const std::string& prefix) {
    const auto& w = params.slot(prefix + ".w");
    const auto& b = params.slot(prefix + ".b");
    return {w.offset, b.offset, w.rows, w.cols};
}

NormOffsets norm_at(const ProbeParams& params, const std::string& prefix) {
    return {params.slot(prefix + ".gain").offset, params.slot(prefix + ".bias").offset};
}

}  // namespace

MlpOffsets mlp_offsets(const ProbeParams& params) {
    MlpOffsets off;
    for (std::size_t l = 0; l < params.mlp.n_layers; ++l) {
        off.layers.push_back(linear_at(params, "fc" + std::to_string(l)));
    }
    return off;
}

TransformerOffsets transformer_offsets(const ProbeParams& params) {
    TransformerOffsets off;
    off.input = linear_at(params, "input");
    for (std::size_t l = 0; l < params.transformer.n_layers; ++l) {
        const std::string p = "block" + std::to_string(l);
        BlockOffsets b;
        b.ln1 = norm_at(params, p + ".ln1");
        b.q = linear_at(params, p + ".attn.q");
        b.k = linear_at(params, p + ".attn.k");
        b.v = linear_at(params, p + ".attn.v");
        b.o = linear_at(params, p + ".attn.o");
        b.ln2 = norm_at(params, p + ".ln2");
        b.ff1 = linear_at(params, p + ".ff1");
        b.ff2 = linear_at(params, p + ".ff2");
        off.blocks.push_back(b);
    }
    off.final_norm = norm_at(params, "final_norm");
    off.scorer1 = linear_at(params, "pool.scorer1");
    off.scorer2 = linear_at(params, "pool.scorer2");
    off.head = linear_at(params, "head");
    return off;
}

double mlp_example(const ProbeParams& params, const MlpOffsets& off, std::span<const double> x, double label,
                   double weight, double scale, double* grad, Score* score) {
    require(x.size() == params.mlp.input_dim, ErrorKind::dimension_mismatch,
            "MLP probe expects input length " + std::to_string(params.mlp.input_dim) + ", got " +
                std::to_string(x.size()));
    const double* base = params.values.data();
    const std::size_t depth = off.layers.size();

    // pre[l] holds layer l's pre-activation, act[l] its input.
    std::vector<std::vector<double>> act(depth);
    std::vector<std::vector<double>> pre(depth);
    act[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < depth; ++l) {
        const auto& lo = off.layers[l];
        pre[l].resize(lo.out);
        kernels::matmul_nt(act[l], {base + lo.w, lo.out * lo.in}, {base + lo.b, lo.out}, pre[l], 1, lo.in, lo.out);
        if (l + 1 < depth) {
            act[l + 1].resize(lo.out);
            for (std::size_t i = 0; i < lo.out; ++i) {
                act[l + 1][i] = gelu(pre[l][i]);
            }
        }
    }
    const double logit = pre.back()[0];
    if (!std::isfinite(logit)) {
        fail(ErrorKind::non_finite, "non-finite probe logit");
    }
    const double p = sigmoid(logit);
    if (score != nullptr) {
        *score = {p, logit};
    }
    const double loss = weight * bce_from_logit(logit, label) * scale;
    if (grad == nullptr) {
        return loss;
    }

    std::vector<double> delta{weight * (p - label) * scale};
    std::vector<double> back;
    for (std::size_t l = depth; l-- > 0;) {
        const auto& lo = off.layers[l];
        kernels::matmul_tn_acc(delta, act[l], {grad + lo.w, lo.out * lo.in}, 1, lo.out, lo.in);
        for (std::size_t i = 0; i < lo.out; ++i) {
            grad[lo.b + i] += delta[i];
        }
        if (l == 0) {
            break;
        }
        back.assign(lo.in, 0.0);
        kernels::matmul_nn(delta, {base + lo.w, lo.out * lo.in}, back, 1, lo.out, lo.in);
        for (std::size_t i = 0; i < lo.in; ++i) {
            back[i] *= gelu_grad(pre[l - 1][i]);
        }
        delta.swap(back);
    }
    return loss;
}

}  // namespace detail

std::string_view to_string(Architecture arch) noexcept {
    return arch == Architecture::mlp ? "mlp" : "transformer";
}

Architecture parse_architecture(std::string_view text) {
    if (text == "mlp") {
        return Architecture::mlp;
    }
    if (text == "transformer") {
        return Architecture::transformer;
    }
    fail(ErrorKind::invalid_argument, "unknown architecture '" + std::string(text) + "'");
}

namespace {

class LayoutBuilder {
public:
    void add(std::string name, std::size_t rows, std::size_t cols) {
        slots_.push_back({std::move(name), offset_, rows, cols});
        offset_ += rows * cols;
    }
    void linear(const std::string& prefix, std::size_t out, std::size_t in) {
        add(prefix + ".w", out, in);
        add(prefix + ".b", 1, out);
    }
    void norm(const std::string& prefix, std::size_t dim) {
        add(prefix + ".gain", 1, dim);
        add(prefix + ".bias", 1, dim);
    }
    std::vector<TensorSlot> take() { return std::move(slots_); }

private:
    std::vector<TensorSlot> slots_;
    std::size_t offset_ = 0;
};

void validate_config(const MLPConfig& c) {
    require(c.input_dim >= 1 && c.hidden_dim >= 1, ErrorKind::invalid_argument, "MLP dims must be >= 1");
    require(c.n_layers >= 2, ErrorKind::invalid_argument, "MLP needs at least 2 layers");
}

void validate_config(const TransformerConfig& c) {
    require(c.input_dim >= 1 && c.model_dim >= 1 && c.n_layers >= 1, ErrorKind::invalid_argument,
            "transformer dims and depth must be >= 1");
    require(c.model_dim % c.heads() == 0, ErrorKind::invalid_argument,
            "model_dim " + std::to_string(c.model_dim) + " is not divisible by " + std::to_string(c.heads()) +
                " heads");
}

bool is_bias_or_norm(const std::string& name) {
    return name.ends_with(".b") || name.ends_with(".bias") || name.ends_with(".gain");
}

void init_values(ProbeParams& p, std::uint64_t seed) {
    p.values.assign(parameter_count(p.layout), 0.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& s : p.layout) {
        double* v = p.values.data() + s.offset;
        if (s.name.ends_with(".gain")) {
            std::fill(v, v + s.size(), 1.0);
        } else if (!is_bias_or_norm(s.name)) {
            const double stddev = 1.0 / std::sqrt(static_cast<double>(s.cols));
            for (std::size_t i = 0; i < s.size(); ++i) {
                v[i] = stddev * normal(rng);
            }
        }
    }
}

}  // namespace

std::vector<TensorSlot> mlp_layout(const MLPConfig& config) {
    validate_config(config);
    LayoutBuilder b;
    std::size_t in = config.input_dim;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::size_t out = l + 1 == config.n_layers ? 1 : config.hidden_dim;
        b.linear("fc" + std::to_string(l), out, in);
        in = out;
    }
    return b.take();
}

std::vector<TensorSlot> transformer_layout(const TransformerConfig& config) {
    validate_config(config);
    const std::size_t d = config.model_dim;
    LayoutBuilder b;
    b.linear("input", d, config.input_dim);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::string p = "block" + std::to_string(l);
        b.norm(p + ".ln1", d);
        b.linear(p + ".attn.q", d, d);
        b.linear(p + ".attn.k", d, d);
        b.linear(p + ".attn.v", d, d);
        b.linear(p + ".attn.o", d, d);
        b.norm(p + ".ln2", d);
        b.linear(p + ".ff1", config.ff(), d);
        b.linear(p + ".ff2", d, config.ff());
    }
    b.norm("final_norm", d);
    b.linear("pool.scorer1", config.scorer_hidden(), d);
    b.linear("pool.scorer2", 1, config.scorer_hidden());
    b.linear("head", 1, d);
    return b.take();
}

std::size_t parameter_count(const std::vector<TensorSlot>& layout) noexcept {
    return layout.empty() ? 0 : layout.back().offset + layout.back().size();
}

std::size_t ProbeParams::feature_dim() const noexcept {
    if (arch == Architecture::transformer) {
        return transformer.input_dim;
    }
    return pca ? pca->dim() : mlp.input_dim;
}

const TensorSlot& ProbeParams::slot(std::string_view name) const {
    for (const auto& s : layout) {
        if (s.name == name) {
            return s;
        }
    }
    fail(ErrorKind::shape_mismatch, "probe has no tensor named '" + std::string(name) + "'");
}

std::span<const double> ProbeParams::tensor(std::string_view name) const {
    const auto& s = slot(name);
    return {values.data() + s.offset, s.size()};
}

std::span<double> ProbeParams::tensor(std::string_view name) {
    const auto& s = slot(name);
    return {values.data() + s.offset, s.size()};
}

ProbeParams init_mlp(const MLPConfig& config, PoolingSpec pooling, std::uint64_t seed) {
    require(pooling.kind != PoolingKind::attention, ErrorKind::invalid_argument,
            "MLP probes use mean, max, last or pca pooling");
    if (pooling.kind == PoolingKind::pca) {
        require(pooling.pca_components == config.input_dim, ErrorKind::invalid_argument,
                "MLP input_dim must equal the number of PCA components");
    }
    ProbeParams p;
    p.arch = Architecture::mlp;
    p.mlp = config;
    p.pooling = pooling;
    p.layout = mlp_layout(config);
    init_values(p, seed);
    return p;
}

ProbeParams init_transformer(const TransformerConfig& config, std::uint64_t seed) {
    ProbeParams p;
    p.arch = Architecture::transformer;
    p.transformer = config;
    p.transformer.n_heads = config.heads();
    p.transformer.ff_dim = config.ff();
    p.pooling = {PoolingKind::attention, 0};
    p.layout = transformer_layout(config);
    init_values(p, seed);
    return p;
}

Score mlp_forward(const ProbeParams& params, std::span<const double> pooled) {
    require(params.arch == Architecture::mlp, ErrorKind::invalid_argument, "not an MLP probe");
    Score s;
    detail::mlp_example(params, detail::mlp_offsets(params), pooled, 0.0, 1.0, 1.0, nullptr, &s);
    return s;
}

Score transformer_forward(const ProbeParams& params, const TokenMatrix& tokens) {
    require(params.arch == Architecture::transformer, ErrorKind::invalid_argument, "not a transformer probe");
    Score s;
    detail::transformer_example(params, detail::transformer_offsets(params), tokens, 0.0, 1.0, 1.0, nullptr, &s);
    return s;
}

ProbeInput prepare_input(const ProbeParams& params, TokenMatrix tokens) {
    require(tokens.cols() == params.feature_dim(), ErrorKind::dimension_mismatch,
            "probe expects hidden dim " + std::to_string(params.feature_dim()) + ", got " +
                std::to_string(tokens.cols()));
    ProbeInput input;
    if (params.arch == Architecture::mlp) {
        input.pooled = pool(params.pooling, tokens, params.pca ? &*params.pca : nullptr);
    } else {
        input.tokens = std::move(tokens);
    }
    return input;
}

Score score_input(const ProbeParams& params, const ProbeInput& input) {
    return params.arch == Architecture::mlp ? mlp_forward(params, input.pooled)
                                            : transformer_forward(params, input.tokens);
}

Score score_record(const ProbeParams& params, const HiddenStateRecord& record) {
    return score_input(params, prepare_input(params, segment_select(record, params.mode)));
}

namespace {

constexpr std::size_t kGradChunks = 4;

struct ExampleRunner {
    const ProbeParams& params;
    detail::MlpOffsets mlp;
    detail::TransformerOffsets transformer;

    explicit ExampleRunner(const ProbeParams& p) : params(p) {
        if (p.arch == Architecture::mlp) {
            mlp = detail::mlp_offsets(p);
        } else {
            transformer = detail::transformer_offsets(p);
        }
    }

    double run(const BatchItem& item, double weight, double scale, double* grad, Score* score) const {
        require(item.input != nullptr, ErrorKind::invalid_argument, "batch item without input");
        if (params.arch == Architecture::mlp) {
            return detail::mlp_example(params, mlp, item.input->pooled, item.label, weight, scale, grad, score);
        }
        return detail::transformer_example(params, transformer, item.input->tokens, item.label, weight, scale,
                                           grad, score);
    }
};

double class_weight(double label, double positive_weight) {
    return label >= 0.5 ? positive_weight : 1.0;
}

}  // namespace

LossAndGrad forward_backward(const ProbeParams& params, std::span<const BatchItem> batch, double positive_weight) {
    require(!batch.empty(), ErrorKind::invalid_argument, "forward_backward needs a non-empty batch");
    const ExampleRunner runner(params);
    const std::size_t n = batch.size();
    const std::size_t chunks = std::min(kGradChunks, n);
    const double scale = 1.0 / static_cast<double>(n);
    const std::size_t width = params.values.size();

    std::vector<std::vector<double>> grads(chunks, std::vector<double>(width, 0.0));
    std::vector<double> losses(chunks, 0.0);
    std::vector<std::string> errors(chunks);
    std::vector<ErrorKind> error_kinds(chunks, ErrorKind::invalid_argument);

#pragma omp parallel for schedule(static, 1) if (chunks > 1 && !kernels::in_parallel())
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
        const auto ci = static_cast<std::size_t>(c);
        const std::size_t begin = ci * n / chunks;
        const std::size_t end = (ci + 1) * n / chunks;
        try {
            for (std::size_t i = begin; i < end; ++i) {
                losses[ci] += runner.run(batch[i], class_weight(batch[i].label, positive_weight), scale,
                                         grads[ci].data(), nullptr);
            }
        } catch (const Error& e) {
            errors[ci] = e.what();
            error_kinds[ci] = e.kind();
        }
    }
    for (std::size_t c = 0; c < chunks; ++c) {
        if (!errors[c].empty()) {
            fail(error_kinds[c], errors[c]);
        }
    }

    LossAndGrad out;
    out.grad = std::move(grads[0]);
    out.loss = losses[0];
    for (std::size_t c = 1; c < chunks; ++c) {
        out.loss += losses[c];
        for (std::size_t i = 0; i < width; ++i) {
            out.grad[i] += grads[c][i];
        }
    }
    if (!std::isfinite(out.loss)) {
        fail(ErrorKind::non_finite, "non-finite batch loss");
    }
    for (const auto& s : params.layout) {
        for (std::size_t i = s.offset; i < s.offset + s.size(); ++i) {
            if (!std::isfinite(out.grad[i])) {
                fail(ErrorKind::non_finite, "non-finite gradient in tensor '" + s.name + "'");
            }
        }
    }
    return out;
}

double batch_loss(const ProbeParams& params, std::span<const BatchItem> batch, double positive_weight) {
    require(!batch.empty(), ErrorKind::invalid_argument, "batch_loss needs a non-empty batch");
    const ExampleRunner runner(params);
    const double scale = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (const auto& item : batch) {
        loss += runner.run(item, class_weight(item.label, positive_weight), scale, nullptr, nullptr);
    }
    return loss;
}

std::vector<double> score_batch(const ProbeParams& params, std::span<const ProbeInput> inputs) {
    const ExampleRunner runner(params);
    std::vector<double> scores(inputs.size());
    std::vector<std::string> errors(inputs.size());
    std::vector<ErrorKind> kinds(inputs.size(), ErrorKind::invalid_argument);
#pragma omp parallel for schedule(dynamic, 8) if (!kernels::in_parallel())
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(inputs.size()); ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            Score s;
            runner.run(BatchItem{&inputs[k], 0.0}, 1.0, 1.0, nullptr, &s);
            scores[k] = s.p;
        } catch (const Error& e) {
            errors[k] = e.what();
            kinds[k] = e.kind();
        }
    }
    for (std::size_t i = 0; i < errors.size(); ++i) {
        if (!errors[i].empty()) {
            fail(kinds[i], errors[i]);
        }
    }
    return scores;
}

}  // namespace hsprobe
