// Pre-norm bidirectional transformer encoder probe:
//   input projection (+ sinusoidal positions) -> blocks -> final norm ->
//   attention pooling -> linear head -> sigmoid.

#include "hsprobe/activation.hpp"
#include "hsprobe/error.hpp"
#include "hsprobe/kernels.hpp"
#include "hsprobe/pooling.hpp"
#include "probe_internal.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hsprobe::detail {

namespace {

constexpr double kNormEps = 1e-5;

using Mat = Matrix<double>;

struct NormCache {
    Mat xhat;
    std::vector<double> inv_std;
};

struct BlockCache {
    Mat a;  // ln1 output
    NormCache ln1;
    Mat q, k, v;
    std::vector<Mat> probs;  // per head, N x N
    Mat o;                   // concatenated head outputs
    Mat b;                   // ln2 output
    NormCache ln2;
    Mat u;  // ff pre-activation
    Mat g;  // gelu(u)
};

struct ForwardCache {
    std::vector<BlockCache> blocks;
    NormCache final_norm;
    Mat z;  // final-normalized tokens
    std::vector<double> alpha;
    std::vector<double> pooled;
};

void layer_norm(const Mat& x, const double* gain, const double* bias, Mat& y, NormCache& cache) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    y = Mat(n, d);
    cache.xhat = Mat(n, d);
    cache.inv_std.assign(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = x.row(r);
        double mean = 0.0;
        for (double v : row) {
            mean += v;
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        cache.inv_std[r] = inv;
        for (std::size_t c = 0; c < d; ++c) {
            const double xh = (row[c] - mean) * inv;
            cache.xhat(r, c) = xh;
            y(r, c) = gain[c] * xh + bias[c];
        }
    }
}

// dx += layer-norm backward of dy; accumulates gain/bias gradients.
void layer_norm_backward(const Mat& dy, const NormCache& cache, const double* gain, Mat& dx,
                         double* dgain, double* dbias) {
    const std::size_t n = dy.rows();
    const std::size_t d = dy.cols();
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < n; ++r) {
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double g = dy(r, c);
            dgain[c] += g * cache.xhat(r, c);
            dbias[c] += g;
            dxhat[c] = g * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * cache.xhat(r, c);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
            dx(r, c) += cache.inv_std[r] * (dxhat[c] - mean_dxhat - cache.xhat(r, c) * mean_dxhat_xhat);
        }
    }
}

std::span<const double> span_of(const double* base, std::size_t offset, std::size_t n) {
    return {base + offset, n};
}

void linear(const Mat& x, const double* base, const LinearOffsets& l, Mat& y) {
    y = Mat(x.rows(), l.out);
    kernels::matmul_nt(x.values(), span_of(base, l.w, l.out * l.in), span_of(base, l.b, l.out), y.values(),
                       x.rows(), l.in, l.out);
}

// Accumulates weight/bias gradients of y = x W^T + b and, when dx is given,
// writes dx = dy W.
void linear_backward(const Mat& dy, const Mat& x, const double* base, const LinearOffsets& l, double* grad,
                     Mat* dx) {
    const std::size_t n = dy.rows();
    kernels::matmul_tn_acc(dy.values(), x.values(), std::span<double>(grad + l.w, l.out * l.in), n, l.out, l.in);
    double* gb = grad + l.b;
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = dy.row(r);
        for (std::size_t c = 0; c < l.out; ++c) {
            gb[c] += row[c];
        }
    }
    if (dx != nullptr) {
        *dx = Mat(n, l.in);
        kernels::matmul_nn(dy.values(), span_of(base, l.w, l.out * l.in), dx->values(), n, l.out, l.in);
    }
}

void add_positional_encoding(Mat& h) {
    const std::size_t d = h.cols();
    std::vector<double> freq(d);
    for (std::size_t i = 0; i < d; ++i) {
        freq[i] = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
    }
    for (std::size_t pos = 0; pos < h.rows(); ++pos) {
        for (std::size_t i = 0; i < d; ++i) {
            const double angle = static_cast<double>(pos) * freq[i];
            h(pos, i) += (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
}

void check_finite(const Mat& m, const std::string& what) {
    for (double v : m.values()) {
        if (!std::isfinite(v)) {
            fail(ErrorKind::non_finite, "non-finite value in " + what);
        }
    }
}

ScorerView scorer_view(const double* base, const TransformerOffsets& off) {
    ScorerView view;
    view.hidden = off.scorer1.out;
    view.w1 = span_of(base, off.scorer1.w, off.scorer1.out * off.scorer1.in);
    view.b1 = span_of(base, off.scorer1.b, off.scorer1.out);
    view.w2 = span_of(base, off.scorer2.w, off.scorer2.in);
    view.b2 = base[off.scorer2.b];
    return view;
}

double forward(const ProbeParams& params, const TransformerOffsets& off, const TokenMatrix& tokens,
               ForwardCache& cache) {
    const auto& cfg = params.transformer;
    const double* base = params.values.data();
    const std::size_t n = tokens.rows();
    const std::size_t d = cfg.model_dim;
    const std::size_t heads = cfg.heads();
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    require(n >= 1, ErrorKind::invalid_argument, "transformer probe needs at least one token");
    require(tokens.cols() == cfg.input_dim, ErrorKind::dimension_mismatch,
            "transformer probe expects hidden dim " + std::to_string(cfg.input_dim) + ", got " +
                std::to_string(tokens.cols()));

    Mat h;
    linear(tokens, base, off.input, h);
    if (cfg.positional_encoding) {
        add_positional_encoding(h);
    }

    cache.blocks.resize(off.blocks.size());
    Mat tmp;
    for (std::size_t l = 0; l < off.blocks.size(); ++l) {
        const auto& bo = off.blocks[l];
        auto& c = cache.blocks[l];

        layer_norm(h, base + bo.ln1.gain, base + bo.ln1.bias, c.a, c.ln1);
        linear(c.a, base, bo.q, c.q);
        linear(c.a, base, bo.k, c.k);
        linear(c.a, base, bo.v, c.v);

        c.o = Mat(n, d, 0.0);
        c.probs.assign(heads, Mat(n, n));
        for (std::size_t hd = 0; hd < heads; ++hd) {
            Mat& p = c.probs[hd];
            const std::size_t col = hd * dh;
            for (std::size_t i = 0; i < n; ++i) {
                double top = -INFINITY;
                for (std::size_t j = 0; j < n; ++j) {
                    p(i, j) = kernels::dot(c.q.row(i).data() + col, c.k.row(j).data() + col, dh) * scale;
                    top = std::max(top, p(i, j));
                }
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    p(i, j) = std::exp(p(i, j) - top);
                    total += p(i, j);
                }
                for (std::size_t j = 0; j < n; ++j) {
                    p(i, j) /= total;
                }
                double* out = c.o.row(i).data() + col;
                for (std::size_t j = 0; j < n; ++j) {
                    const double w = p(i, j);
                    const double* vj = c.v.row(j).data() + col;
                    for (std::size_t e = 0; e < dh; ++e) {
                        out[e] += w * vj[e];
                    }
                }
            }
        }
        linear(c.o, base, bo.o, tmp);
        for (std::size_t i = 0; i < h.size(); ++i) {
            h.data()[i] += tmp.data()[i];
        }

        layer_norm(h, base + bo.ln2.gain, base + bo.ln2.bias, c.b, c.ln2);
        linear(c.b, base, bo.ff1, c.u);
        c.g = Mat(c.u.rows(), c.u.cols());
        for (std::size_t i = 0; i < c.u.size(); ++i) {
            c.g.data()[i] = gelu(c.u.data()[i]);
        }
        linear(c.g, base, bo.ff2, tmp);
        for (std::size_t i = 0; i < h.size(); ++i) {
            h.data()[i] += tmp.data()[i];
        }
        check_finite(h, "encoder block " + std::to_string(l) + " output");
    }

    layer_norm(h, base + off.final_norm.gain, base + off.final_norm.bias, cache.z, cache.final_norm);

    const auto scorer = scorer_view(base, off);
    cache.alpha = attention_weights(cache.z, scorer);
    cache.pooled.assign(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = cache.z.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            cache.pooled[c] += cache.alpha[r] * row[c];
        }
    }
    const double logit = kernels::dot(base + off.head.w, cache.pooled.data(), d) + base[off.head.b];
    if (!std::isfinite(logit)) {
        fail(ErrorKind::non_finite, "non-finite probe logit");
    }
    return logit;
}

}  // namespace

double transformer_example(const ProbeParams& params, const TransformerOffsets& off, const TokenMatrix& tokens,
                           double label, double weight, double scale, double* grad, Score* score) {
    ForwardCache cache;
    const double logit = forward(params, off, tokens, cache);
    const double p = sigmoid(logit);
    if (score != nullptr) {
        *score = {p, logit};
    }
    const double loss = weight * bce_from_logit(logit, label) * scale;
    if (grad == nullptr) {
        return loss;
    }

    const auto& cfg = params.transformer;
    const double* base = params.values.data();
    const std::size_t n = tokens.rows();
    const std::size_t d = cfg.model_dim;
    const std::size_t heads = cfg.heads();
    const std::size_t dh = d / heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // Head.
    const double dlogit = weight * (p - label) * scale;
    for (std::size_t c = 0; c < d; ++c) {
        grad[off.head.w + c] += dlogit * cache.pooled[c];
    }
    grad[off.head.b] += dlogit;
    std::vector<double> dpooled(d);
    for (std::size_t c = 0; c < d; ++c) {
        dpooled[c] = dlogit * base[off.head.w + c];
    }

    // Attention pooling.
    Mat dz(n, d, 0.0);
    std::vector<double> dalpha(n);
    double mean_dalpha = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = cache.z.row(r);
        dalpha[r] = kernels::dot(row.data(), dpooled.data(), d);
        mean_dalpha += cache.alpha[r] * dalpha[r];
        for (std::size_t c = 0; c < d; ++c) {
            dz(r, c) += cache.alpha[r] * dpooled[c];
        }
    }
    const auto& s1 = off.scorer1;
    const std::size_t hs = s1.out;
    for (std::size_t r = 0; r < n; ++r) {
        const double ds = cache.alpha[r] * (dalpha[r] - mean_dalpha);
        if (ds == 0.0) {
            continue;
        }
        const double* zr = cache.z.row(r).data();
        grad[off.scorer2.b] += ds;
        for (std::size_t hd = 0; hd < hs; ++hd) {
            const double* w1 = base + s1.w + hd * d;
            const double u = kernels::dot(w1, zr, d) + base[s1.b + hd];
            grad[off.scorer2.w + hd] += ds * gelu(u);
            const double du = ds * base[off.scorer2.w + hd] * gelu_grad(u);
            grad[s1.b + hd] += du;
            double* gw1 = grad + s1.w + hd * d;
            double* dzr = dz.row(r).data();
            for (std::size_t c = 0; c < d; ++c) {
                gw1[c] += du * zr[c];
                dzr[c] += du * w1[c];
            }
        }
    }

    // Final norm.
    Mat dh_res(n, d, 0.0);
    layer_norm_backward(dz, cache.final_norm, base + off.final_norm.gain, dh_res, grad + off.final_norm.gain,
                        grad + off.final_norm.bias);

    Mat dtmp;
    for (std::size_t l = off.blocks.size(); l-- > 0;) {
        const auto& bo = off.blocks[l];
        const auto& c = cache.blocks[l];

        // Feed-forward sub-layer: h += ff2(gelu(ff1(ln2(h)))).
        Mat dg;
        linear_backward(dh_res, c.g, base, bo.ff2, grad, &dg);
        for (std::size_t i = 0; i < dg.size(); ++i) {
            dg.data()[i] *= gelu_grad(c.u.data()[i]);
        }
        Mat db;
        linear_backward(dg, c.b, base, bo.ff1, grad, &db);
        layer_norm_backward(db, c.ln2, base + bo.ln2.gain, dh_res, grad + bo.ln2.gain, grad + bo.ln2.bias);

        // Attention sub-layer: h += o(attn(ln1(h))).
        Mat d_o;
        linear_backward(dh_res, c.o, base, bo.o, grad, &d_o);
        Mat dq(n, d, 0.0);
        Mat dk(n, d, 0.0);
        Mat dv(n, d, 0.0);
        std::vector<double> dp(n);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const Mat& p = c.probs[hd];
            const std::size_t col = hd * dh;
            for (std::size_t i = 0; i < n; ++i) {
                const double* doi = d_o.row(i).data() + col;
                double row_dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dp[j] = kernels::dot(doi, c.v.row(j).data() + col, dh);
                    row_dot += dp[j] * p(i, j);
                    double* dvj = dv.row(j).data() + col;
                    const double w = p(i, j);
                    for (std::size_t e = 0; e < dh; ++e) {
                        dvj[e] += w * doi[e];
                    }
                }
                double* dqi = dq.row(i).data() + col;
                const double* qi = c.q.row(i).data() + col;
                for (std::size_t j = 0; j < n; ++j) {
                    const double dsij = p(i, j) * (dp[j] - row_dot) * attn_scale;
                    if (dsij == 0.0) {
                        continue;
                    }
                    const double* kj = c.k.row(j).data() + col;
                    double* dkj = dk.row(j).data() + col;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dqi[e] += dsij * kj[e];
                        dkj[e] += dsij * qi[e];
                    }
                }
            }
        }
        Mat da;
        linear_backward(dq, c.a, base, bo.q, grad, &da);
        linear_backward(dk, c.a, base, bo.k, grad, &dtmp);
        for (std::size_t i = 0; i < da.size(); ++i) {
            da.data()[i] += dtmp.data()[i];
        }
        linear_backward(dv, c.a, base, bo.v, grad, &dtmp);
        for (std::size_t i = 0; i < da.size(); ++i) {
            da.data()[i] += dtmp.data()[i];
        }
        layer_norm_backward(da, c.ln1, base + bo.ln1.gain, dh_res, grad + bo.ln1.gain, grad + bo.ln1.bias);
    }

    linear_backward(dh_res, tokens, base, off.input, grad, nullptr);
    return loss;
}

}  // namespace hsprobe::detail
