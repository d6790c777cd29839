#pragma once

// Independent re-implementation of the transformer probe loss, written
// straight from the math, plus a staged central-difference gradient.
//
// A parameter in sublayer s cannot change the residual stream entering s, so
// the finite difference for it restarts from the cached stream at s. Weights
// that feed the residual through a single output column (attn.o, ff2) or a
// single hidden unit (ff1) are applied as an exact column update to the cached
// stream instead of a full sublayer recompute. Every loss value is still a
// full nonlinear evaluation of everything downstream.

#include "hsprobe/kernels.hpp"
#include "hsprobe/probes.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace hsprobe::testing {

class ReferenceTransformer {
public:
    ReferenceTransformer(const ProbeParams& params, const std::vector<ProbeInput>& inputs,
                         std::vector<double> labels)
        : params_(params), labels_(std::move(labels)) {
        const auto& cfg = params.transformer;
        d_ = cfg.model_dim;
        ff_ = cfg.ff();
        heads_ = cfg.heads();
        layers_ = cfg.n_layers;
        for (std::size_t l = 0; l < layers_; ++l) {
            const std::string p = "block" + std::to_string(l);
            BlockOff b;
            for (auto [field, name] : {std::pair{&b.ln1g, ".ln1.gain"}, {&b.ln1b, ".ln1.bias"}, {&b.qw, ".attn.q.w"},
                                       {&b.qb, ".attn.q.b"}, {&b.kw, ".attn.k.w"}, {&b.kb, ".attn.k.b"},
                                       {&b.vw, ".attn.v.w"}, {&b.vb, ".attn.v.b"}, {&b.ow, ".attn.o.w"},
                                       {&b.ob, ".attn.o.b"}, {&b.ln2g, ".ln2.gain"}, {&b.ln2b, ".ln2.bias"},
                                       {&b.f1w, ".ff1.w"}, {&b.f1b, ".ff1.b"}, {&b.f2w, ".ff2.w"}, {&b.f2b, ".ff2.b"}}) {
                *field = params.slot(p + name).offset;
            }
            blocks_.push_back(b);
        }
        std::size_t total = 0;
        for (const auto& in : inputs) {
            begin_.push_back(total);
            len_.push_back(in.tokens.rows());
            total += in.tokens.rows();
        }
        tokens_ = Matrix<double>(total, cfg.input_dim);
        for (std::size_t e = 0; e < inputs.size(); ++e) {
            for (std::size_t r = 0; r < len_[e]; ++r) {
                for (std::size_t c = 0; c < cfg.input_dim; ++c) {
                    tokens_(begin_[e] + r, c) = inputs[e].tokens(r, c);
                }
            }
        }
    }

    double loss(const std::vector<double>& theta) const {
        return run_from(theta, 0, embed(theta));
    }

    std::vector<double> fd_gradient(double h) const {
        const auto& theta = params_.values;
        Cache base;
        {
            Mat s = embed(theta);
            for (std::size_t l = 0; l < layers_; ++l) {
                base.streams.push_back(s);
                AttnParts parts_a = attention_inputs(theta, l, s);
                Mat o = attention_core(parts_a);
                s = add(s, linear(o, theta.data() + blocks_[l].ow, theta.data() + blocks_[l].ob, d_));
                base.o.push_back(std::move(o));
                base.attn.push_back(std::move(parts_a));
                base.streams.push_back(s);
                FfParts parts;
                s = add(s, feed_forward(theta, l, s, &parts));
                base.ff.push_back(std::move(parts));
            }
            base.streams.push_back(s);
        }

        std::vector<double> grad(theta.size(), 0.0);
        std::vector<double> work = theta;
        for (const auto& slot : params_.layout) {
            const Target t = classify(slot.name);
            for (std::size_t idx = 0; idx < slot.size(); ++idx) {
                const std::size_t k = slot.offset + idx;
                // weights are out x in; biases are 1 x out and use idx directly
                const std::size_t row = idx / slot.cols;
                const std::size_t col = idx % slot.cols;
                double f[2];
                for (int side = 0; side < 2; ++side) {
                    const double step = side == 0 ? h : -h;
                    switch (t.kind) {
                        case Kind::embed:
                            work[k] = theta[k] + step;
                            f[side] = run_from(work, 0, embed(work));
                            work[k] = theta[k];
                            break;
                        case Kind::restart:
                            work[k] = theta[k] + step;
                            f[side] = run_from(work, t.stage, base.streams[t.stage]);
                            work[k] = theta[k];
                            break;
                        case Kind::attn_qkv_w:
                        case Kind::attn_qkv_b:
                            f[side] = run_from(theta, t.stage + 1,
                                               qkv_update(theta, t.layer, base, t.which, row, col, idx,
                                                          t.kind == Kind::attn_qkv_w, step));
                            break;
                        case Kind::attn_out_w:
                            f[side] = run_from(theta, t.stage + 1,
                                               column_update(base.streams[t.stage + 1], row, step, &base.o[t.layer], col));
                            break;
                        case Kind::attn_out_b:
                        case Kind::ff2_b:
                            f[side] = run_from(theta, t.stage + 1,
                                               column_update(base.streams[t.stage + 1], idx, step, nullptr, 0));
                            break;
                        case Kind::ff2_w:
                            f[side] = run_from(theta, t.stage + 1,
                                               column_update(base.streams[t.stage + 1], row, step, &base.ff[t.layer].g, col));
                            break;
                        case Kind::ff1_w:
                        case Kind::ff1_b:
                            f[side] = run_from(theta, t.stage + 1,
                                               t.kind == Kind::ff1_w
                                                   ? hidden_update(theta, t.layer, base, row, &base.ff[t.layer].b, col, step)
                                                   : hidden_update(theta, t.layer, base, idx, nullptr, 0, step));
                            break;
                    }
                }
                grad[k] = (f[0] - f[1]) / (2.0 * h);
            }
        }
        return grad;
    }

private:
    using Mat = Matrix<double>;

    struct BlockOff {
        std::size_t ln1g, ln1b, qw, qb, kw, kb, vw, vb, ow, ob, ln2g, ln2b, f1w, f1b, f2w, f2b;
    };

    struct AttnParts {
        Mat q, k, v;
        Mat a;  // ln1 output
    };

    struct FfParts {
        Mat b;  // ln2 output
        Mat u;  // ff1 pre-activation
        Mat g;  // gelu(u)
    };

    struct Cache {
        std::vector<Mat> streams;  // entering stage s; stage 2l = attention l, 2l+1 = ff l, 2L = head
        std::vector<Mat> o;        // attention output before the o projection
        std::vector<AttnParts> attn;
        std::vector<FfParts> ff;
    };

    enum class Kind { embed, restart, attn_qkv_w, attn_qkv_b, attn_out_w, attn_out_b, ff1_w, ff1_b, ff2_w, ff2_b };

    struct Target {
        Kind kind = Kind::restart;
        std::size_t stage = 0;
        std::size_t layer = 0;
        int which = 0;  // 0 q, 1 k, 2 v
    };


    Target classify(const std::string& name) const {
        if (name.rfind("input.", 0) == 0) {
            return {Kind::embed, 0, 0};
        }
        if (name.rfind("block", 0) == 0) {
            const std::size_t dot = name.find('.');
            const std::size_t l = std::stoul(name.substr(5, dot - 5));
            const std::string rest = name.substr(dot + 1);
            for (int which = 0; which < 3; ++which) {
                const std::string m = std::string("attn.") + "qkv"[which];
                if (rest == m + ".w") return {Kind::attn_qkv_w, 2 * l, l, which};
                if (rest == m + ".b") return {Kind::attn_qkv_b, 2 * l, l, which};
            }
            if (rest == "attn.o.w") return {Kind::attn_out_w, 2 * l, l};
            if (rest == "attn.o.b") return {Kind::attn_out_b, 2 * l, l};
            if (rest == "ff1.w") return {Kind::ff1_w, 2 * l + 1, l};
            if (rest == "ff1.b") return {Kind::ff1_b, 2 * l + 1, l};
            if (rest == "ff2.w") return {Kind::ff2_w, 2 * l + 1, l};
            if (rest == "ff2.b") return {Kind::ff2_b, 2 * l + 1, l};
            if (rest.rfind("ln2.", 0) == 0) return {Kind::restart, 2 * l + 1, l};
            return {Kind::restart, 2 * l, l};
        }
        return {Kind::restart, 2 * layers_, 0};
    }

    const double* at(const std::vector<double>& theta, const std::string& name) const {
        return theta.data() + params_.slot(name).offset;
    }

    static double gelu(double x) {
        const double c = std::sqrt(2.0 / 3.14159265358979323846);
        const double y = c * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + (y >= 0 ? 1.0 - 2.0 / (std::exp(2.0 * y) + 1.0) : 2.0 / (std::exp(-2.0 * y) + 1.0) - 1.0));
    }

    static Mat add(const Mat& a, const Mat& b) {
        Mat out = a;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data()[i] += b.data()[i];
        }
        return out;
    }

    static Mat linear(const Mat& x, const double* w, const double* b, std::size_t out) {
        Mat y(x.rows(), out);
        kernels::serial::matmul_nt(x.values(), {w, out * x.cols()}, {b, out}, y.values(), x.rows(), x.cols(), out);
        return y;
    }

    static Mat layer_norm(const Mat& x, const double* gain, const double* bias) {
        Mat y(x.rows(), x.cols());
        const double d = static_cast<double>(x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            double mean = 0.0;
            for (std::size_t c = 0; c < x.cols(); ++c) mean += x(r, c);
            mean /= d;
            double var = 0.0;
            for (std::size_t c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
            var /= d;
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = gain[c] * (x(r, c) - mean) * inv + bias[c];
        }
        return y;
    }

    Mat embed(const std::vector<double>& theta) const {
        Mat s = linear(tokens_, at(theta, "input.w"), at(theta, "input.b"), d_);
        if (params_.transformer.positional_encoding) {
            for (std::size_t e = 0; e < len_.size(); ++e) {
                for (std::size_t pos = 0; pos < len_[e]; ++pos) {
                    for (std::size_t i = 0; i < d_; ++i) {
                        const double angle = static_cast<double>(pos) /
                                             std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d_));
                        s(begin_[e] + pos, i) += i % 2 == 0 ? std::sin(angle) : std::cos(angle);
                    }
                }
            }
        }
        return s;
    }

    AttnParts attention_inputs(const std::vector<double>& theta, std::size_t l, const Mat& s) const {
        const BlockOff& b = blocks_[l];
        const double* t = theta.data();
        AttnParts parts;
        parts.a = layer_norm(s, t + b.ln1g, t + b.ln1b);
        parts.q = linear(parts.a, t + b.qw, t + b.qb, d_);
        parts.k = linear(parts.a, t + b.kw, t + b.kb, d_);
        parts.v = linear(parts.a, t + b.vw, t + b.vb, d_);
        return parts;
    }

    // Per-example softmax(q k^T / sqrt(dh)) v for every head.
    Mat attention_core(const AttnParts& parts) const {
        const Mat& q = parts.q;
        const Mat& k = parts.k;
        const Mat& v = parts.v;
        const std::size_t dh = d_ / heads_;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Mat o(q.rows(), d_, 0.0);
        std::vector<double> w;
        for (std::size_t e = 0; e < len_.size(); ++e) {
            const std::size_t b0 = begin_[e];
            const std::size_t n = len_[e];
            for (std::size_t hd = 0; hd < heads_; ++hd) {
                for (std::size_t i = 0; i < n; ++i) {
                    w.assign(n, 0.0);
                    double top = -INFINITY;
                    for (std::size_t j = 0; j < n; ++j) {
                        double dotp = 0.0;
                        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) dotp += q(b0 + i, c) * k(b0 + j, c);
                        w[j] = dotp * scale;
                        top = std::max(top, w[j]);
                    }
                    double total = 0.0;
                    for (auto& x : w) {
                        x = std::exp(x - top);
                        total += x;
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) o(b0 + i, c) += w[j] / total * v(b0 + j, c);
                    }
                }
            }
        }
        return o;
    }

    Mat attention(const std::vector<double>& theta, std::size_t l, const Mat& s) const {
        const Mat o = attention_core(attention_inputs(theta, l, s));
        return linear(o, theta.data() + blocks_[l].ow, theta.data() + blocks_[l].ob, d_);
    }

    Mat feed_forward(const std::vector<double>& theta, std::size_t l, const Mat& s, FfParts* parts) const {
        const BlockOff& bo = blocks_[l];
        const double* t = theta.data();
        FfParts f;
        f.b = layer_norm(s, t + bo.ln2g, t + bo.ln2b);
        f.u = linear(f.b, t + bo.f1w, t + bo.f1b, ff_);
        f.g = Mat(f.u.rows(), f.u.cols());
        for (std::size_t i = 0; i < f.u.size(); ++i) f.g.data()[i] = gelu(f.u.data()[i]);
        Mat delta = linear(f.g, t + bo.f2w, t + bo.f2b, d_);
        if (parts != nullptr) *parts = std::move(f);
        return delta;
    }

    double head_loss(const std::vector<double>& theta, const Mat& s) const {
        const Mat z = layer_norm(s, at(theta, "final_norm.gain"), at(theta, "final_norm.bias"));
        const std::size_t hidden = params_.transformer.scorer_hidden();
        const Mat hpre = linear(z, at(theta, "pool.scorer1.w"), at(theta, "pool.scorer1.b"), hidden);
        const double* w2 = at(theta, "pool.scorer2.w");
        const double b2 = *at(theta, "pool.scorer2.b");
        const double* hw = at(theta, "head.w");
        const double hb = *at(theta, "head.b");
        double total = 0.0;
        for (std::size_t e = 0; e < len_.size(); ++e) {
            std::vector<double> score(len_[e]);
            double top = -INFINITY;
            for (std::size_t i = 0; i < len_[e]; ++i) {
                double sc = b2;
                for (std::size_t j = 0; j < hidden; ++j) sc += w2[j] * gelu(hpre(begin_[e] + i, j));
                score[i] = sc;
                top = std::max(top, sc);
            }
            double norm = 0.0;
            for (auto& x : score) {
                x = std::exp(x - top);
                norm += x;
            }
            double logit = hb;
            for (std::size_t c = 0; c < d_; ++c) {
                double pooled = 0.0;
                for (std::size_t i = 0; i < len_[e]; ++i) pooled += score[i] / norm * z(begin_[e] + i, c);
                logit += hw[c] * pooled;
            }
            // -[y log s(x) + (1-y) log s(-x)] = softplus(x) - y x
            const double softplus = logit > 0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
            total += softplus - labels_[e] * logit;
        }
        return total / static_cast<double>(len_.size());
    }

    double run_from(const std::vector<double>& theta, std::size_t stage, Mat s) const {
        for (std::size_t st = stage; st < 2 * layers_; ++st) {
            const std::size_t l = st / 2;
            s = add(s, st % 2 == 0 ? attention(theta, l, s) : feed_forward(theta, l, s, nullptr));
        }
        return head_loss(theta, s);
    }

    // Residual column `out_col` moved by step * source(:, src_col), or by step
    // when source is null (a bias).
    static Mat column_update(const Mat& stream, std::size_t out_col, double step, const Mat* source,
                             std::size_t src_col) {
        Mat s = stream;
        for (std::size_t r = 0; r < s.rows(); ++r) {
            s(r, out_col) += step * (source != nullptr ? (*source)(r, src_col) : 1.0);
        }
        return s;
    }

    // Column `unit` of q, k or v moved by step * ln1(:, in_col) (weight) or by
    // step (bias); attention and the o projection are then recomputed.
    Mat qkv_update(const std::vector<double>& theta, std::size_t l, const Cache& base, int which,
                   std::size_t row, std::size_t col, std::size_t idx, bool is_weight, double step) const {
        AttnParts parts = base.attn[l];
        Mat& target = which == 0 ? parts.q : which == 1 ? parts.k : parts.v;
        const std::size_t unit = is_weight ? row : idx;
        for (std::size_t r = 0; r < target.rows(); ++r) {
            target(r, unit) += step * (is_weight ? parts.a(r, col) : 1.0);
        }
        const Mat o = attention_core(parts);
        return add(base.streams[2 * l], linear(o, theta.data() + blocks_[l].ow, theta.data() + blocks_[l].ob, d_));
    }

    // Hidden unit `unit` of ff1 shifted by step * input(:, in_col) (or step for
    // the bias); the change flows through gelu and column `unit` of ff2.w.
    Mat hidden_update(const std::vector<double>& theta, std::size_t l, const Cache& base, std::size_t unit,
                      const Mat* input, std::size_t in_col, double step) const {
        const auto& f = base.ff[l];
        const double* w2 = theta.data() + blocks_[l].f2w;
        Mat s = base.streams[2 * l + 2];
        for (std::size_t r = 0; r < s.rows(); ++r) {
            const double du = step * (input != nullptr ? (*input)(r, in_col) : 1.0);
            const double dg = gelu(f.u(r, unit) + du) - f.g(r, unit);
            for (std::size_t c = 0; c < d_; ++c) s(r, c) += w2[c * ff_ + unit] * dg;
        }
        return s;
    }

    const ProbeParams& params_;
    std::vector<double> labels_;
    std::size_t d_ = 0;
    std::size_t ff_ = 0;
    std::size_t heads_ = 1;
    std::size_t layers_ = 0;
    std::vector<BlockOff> blocks_;
    Matrix<double> tokens_;
    std::vector<std::size_t> begin_;
    std::vector<std::size_t> len_;
};

}  // namespace hsprobe::testing
