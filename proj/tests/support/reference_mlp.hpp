#pragma once

// Independent MLP probe loss and a staged central-difference gradient.
// Perturbing fc_l.w(i, j) or fc_l.b(i) only moves unit i of layer l's
// pre-activation, so the next layer's pre-activation is updated by one
// column of its weights and the forward pass resumes from there.

#include "hsprobe/kernels.hpp"
#include "hsprobe/probes.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace hsprobe::testing {

class ReferenceMlp {
public:
    ReferenceMlp(const ProbeParams& params, const std::vector<ProbeInput>& inputs, std::vector<double> labels)
        : params_(params), labels_(std::move(labels)) {
        for (std::size_t l = 0; l < params.mlp.n_layers; ++l) {
            const auto& w = params.slot("fc" + std::to_string(l) + ".w");
            layers_.push_back({w.offset, params.slot("fc" + std::to_string(l) + ".b").offset, w.rows, w.cols});
        }
        x_ = Matrix<double>(inputs.size(), params.mlp.input_dim);
        for (std::size_t e = 0; e < inputs.size(); ++e) {
            for (std::size_t c = 0; c < params.mlp.input_dim; ++c) {
                x_(e, c) = inputs[e].pooled[c];
            }
        }
    }

    double loss(const std::vector<double>& theta) const {
        return resume(theta, 0, x_);
    }

    std::vector<double> fd_gradient(double h) const {
        const auto& theta = params_.values;
        // act[l] = input of layer l, pre[l] = its output before gelu.
        std::vector<Matrix<double>> act{x_};
        std::vector<Matrix<double>> pre;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            pre.push_back(linear(theta, l, act.back()));
            if (l + 1 < layers_.size()) {
                act.push_back(activate(pre.back()));
            }
        }

        std::vector<double> grad(theta.size(), 0.0);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const Layer& ly = layers_[l];
            for (std::size_t unit = 0; unit < ly.out; ++unit) {
                // column in_col of act[l], or the bias when in_col == in
                for (std::size_t in_col = 0; in_col <= ly.in; ++in_col) {
                    double f[2];
                    for (int side = 0; side < 2; ++side) {
                        const double step = side == 0 ? h : -h;
                        Matrix<double> z = pre[l];
                        for (std::size_t e = 0; e < z.rows(); ++e) {
                            z(e, unit) += step * (in_col < ly.in ? act[l](e, in_col) : 1.0);
                        }
                        if (l + 1 == layers_.size()) {
                            f[side] = bce(z);
                            continue;
                        }
                        // push the changed unit through gelu into layer l + 1
                        const Layer& next = layers_[l + 1];
                        Matrix<double> z_next = pre[l + 1];
                        for (std::size_t e = 0; e < z.rows(); ++e) {
                            const double da = gelu(z(e, unit)) - act[l + 1](e, unit);
                            for (std::size_t o = 0; o < next.out; ++o) {
                                z_next(e, o) += theta[next.w + o * next.in + unit] * da;
                            }
                        }
                        f[side] = l + 2 == layers_.size() ? bce(z_next) : resume(theta, l + 2, activate(z_next));
                    }
                    const std::size_t k = in_col < ly.in ? ly.w + unit * ly.in + in_col : ly.b + unit;
                    grad[k] = (f[0] - f[1]) / (2.0 * h);
                }
            }
        }
        return grad;
    }

private:
    struct Layer {
        std::size_t w = 0;
        std::size_t b = 0;
        std::size_t out = 0;
        std::size_t in = 0;
    };

    static double gelu(double x) {
        const double c = std::sqrt(2.0 / 3.14159265358979323846);
        const double y = c * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + (y >= 0 ? 1.0 - 2.0 / (std::exp(2.0 * y) + 1.0) : 2.0 / (std::exp(-2.0 * y) + 1.0) - 1.0));
    }

    static Matrix<double> activate(Matrix<double> z) {
        for (auto& v : z.values()) v = gelu(v);
        return z;
    }

    Matrix<double> linear(const std::vector<double>& theta, std::size_t l, const Matrix<double>& x) const {
        const Layer& ly = layers_[l];
        Matrix<double> y(x.rows(), ly.out);
        kernels::serial::matmul_nt(x.values(), {theta.data() + ly.w, ly.out * ly.in}, {theta.data() + ly.b, ly.out},
                                   y.values(), x.rows(), ly.in, ly.out);
        return y;
    }

    double bce(const Matrix<double>& logits) const {
        double total = 0.0;
        for (std::size_t e = 0; e < logits.rows(); ++e) {
            const double z = logits(e, 0);
            const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
            total += softplus - labels_[e] * z;
        }
        return total / static_cast<double>(logits.rows());
    }

    // Forward from layer `first` given its input activations.
    double resume(const std::vector<double>& theta, std::size_t first, Matrix<double> a) const {
        for (std::size_t l = first; l < layers_.size(); ++l) {
            Matrix<double> z = linear(theta, l, a);
            if (l + 1 == layers_.size()) {
                return bce(z);
            }
            a = activate(std::move(z));
        }
        return bce(a);
    }

    const ProbeParams& params_;
    std::vector<double> labels_;
    std::vector<Layer> layers_;
    Matrix<double> x_;
};

}  // namespace hsprobe::testing
