#ifndef EMBDISTILL_NN_HPP
#define EMBDISTILL_NN_HPP

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "embdistill/errors.hpp"
#include "embdistill/matrix.hpp"

namespace embd {

// ---------------------------------------------------------------------------
// Linear layer: Y = X * W^T + b, W is d_out x d_in, X is n x d_in.
// ---------------------------------------------------------------------------

template <typename T>
struct LinearCache {
    MatT<T> W;
    MatT<T> X;
    bool has_bias = false;
};

template <typename T>
struct LinearResult {
    MatT<T> Y;
    LinearCache<T> cache;
};

template <typename T>
MatT<T> linear_apply(const MatT<T>& W, std::span<const T> bias, const MatT<T>& X) {
    if (X.cols() != W.cols()) {
        throw DimensionError("linear: X cols " + std::to_string(X.cols()) + " != W cols " +
                             std::to_string(W.cols()));
    }
    if (!bias.empty() && bias.size() != W.rows()) {
        throw DimensionError("linear: bias length " + std::to_string(bias.size()) +
                             " != W rows " + std::to_string(W.rows()));
    }
    const std::size_t n = X.rows(), d_out = W.rows(), d_in = W.cols();
    MatT<T> Y(n, d_out);
    for (std::size_t i = 0; i < n; ++i) {
        const T* x = X.row(i).data();
        for (std::size_t o = 0; o < d_out; ++o) {
            const T* w = W.row(o).data();
            double acc = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
            for (std::size_t k = 0; k < d_in; ++k) {
                acc += static_cast<double>(x[k]) * static_cast<double>(w[k]);
            }
            Y(i, o) = static_cast<T>(acc);
        }
    }
    return Y;
}

template <typename T>
LinearResult<T> linear_forward(const MatT<T>& W, std::span<const T> bias, const MatT<T>& X) {
    LinearResult<T> r;
    r.Y = linear_apply(W, bias, X);
    r.cache.W = W;
    r.cache.X = X;
    r.cache.has_bias = !bias.empty();
    return r;
}

template <typename T>
struct LinearGrads {
    MatT<T> grad_W;
    std::vector<T> grad_b;
    MatT<T> grad_X;
};

template <typename T>
LinearGrads<T> linear_backward(const MatT<T>& grad_out, const LinearCache<T>& cache) {
    const std::size_t n = cache.X.rows(), d_out = cache.W.rows(), d_in = cache.W.cols();
    if (grad_out.rows() != n || grad_out.cols() != d_out) {
        throw ContractViolationError("linear_backward: grad_out shape " +
                                     std::to_string(grad_out.rows()) + "x" +
                                     std::to_string(grad_out.cols()) +
                                     " does not match cached forward pass");
    }
    LinearGrads<T> g;
    g.grad_W = MatT<T>(d_out, d_in);
    g.grad_b.assign(cache.has_bias ? d_out : 0, T(0));
    g.grad_X = MatT<T>(n, d_in);
    for (std::size_t o = 0; o < d_out; ++o) {
        for (std::size_t k = 0; k < d_in; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += static_cast<double>(grad_out(i, o)) * static_cast<double>(cache.X(i, k));
            }
            g.grad_W(o, k) = static_cast<T>(acc);
        }
        if (cache.has_bias) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(grad_out(i, o));
            g.grad_b[o] = static_cast<T>(acc);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d_in; ++k) {
            double acc = 0.0;
            for (std::size_t o = 0; o < d_out; ++o) {
                acc += static_cast<double>(grad_out(i, o)) * static_cast<double>(cache.W(o, k));
            }
            g.grad_X(i, k) = static_cast<T>(acc);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over features (columns).
// ---------------------------------------------------------------------------

enum class BnMode { train, eval };

template <typename T>
struct BatchNormStateT {
    std::vector<T> gamma;
    std::vector<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);
    BnMode mode = BnMode::train;

    static BatchNormStateT identity(std::size_t features) {
        BatchNormStateT s;
        s.gamma.assign(features, T(1));
        s.beta.assign(features, T(0));
        s.running_mean.assign(features, T(0));
        s.running_var.assign(features, T(1));
        return s;
    }
    std::size_t features() const { return gamma.size(); }
};

using BatchNormState = BatchNormStateT<float>;

template <typename T>
struct BatchNormCache {
    MatT<T> x_hat;
    std::vector<double> inv_std;
    std::vector<T> gamma;
    BnMode mode = BnMode::train;
};

template <typename T>
struct BatchNormResult {
    MatT<T> Y;
    BatchNormCache<T> cache;
};

// Train mode normalizes with batch statistics (biased variance) and updates
// running stats with momentum (unbiased variance, the usual convention).
// Eval mode is a pure affine function of the input.
template <typename T>
BatchNormResult<T> batchnorm_forward(const MatT<T>& X, BatchNormStateT<T>& state) {
    const std::size_t n = X.rows(), d = X.cols();
    if (d != state.features()) {
        throw DimensionError("batchnorm: X cols " + std::to_string(d) + " != state features " +
                             std::to_string(state.features()));
    }
    BatchNormResult<T> r;
    r.Y = MatT<T>(n, d);
    r.cache.x_hat = MatT<T>(n, d);
    r.cache.inv_std.assign(d, 0.0);
    r.cache.gamma = state.gamma;
    r.cache.mode = state.mode;

    if (state.mode == BnMode::train) {
        if (n < 2) {
            throw DegenerateBatchError("batchnorm train mode requires batch size >= 2");
        }
        for (std::size_t j = 0; j < d; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += static_cast<double>(X(i, j));
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double c = static_cast<double>(X(i, j)) - mean;
                var += c * c;
            }
            var /= static_cast<double>(n);
            if (var == 0.0) {
                throw DegenerateBatchError("batchnorm train mode: feature " + std::to_string(j) +
                                           " is constant across the batch");
            }
            const double inv = 1.0 / std::sqrt(var + static_cast<double>(state.eps));
            r.cache.inv_std[j] = inv;
            const double g = static_cast<double>(state.gamma[j]);
            const double b = static_cast<double>(state.beta[j]);
            for (std::size_t i = 0; i < n; ++i) {
                const double xh = (static_cast<double>(X(i, j)) - mean) * inv;
                r.cache.x_hat(i, j) = static_cast<T>(xh);
                r.Y(i, j) = static_cast<T>(g * xh + b);
            }
            const double m = static_cast<double>(state.momentum);
            const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
            state.running_mean[j] =
                static_cast<T>((1.0 - m) * static_cast<double>(state.running_mean[j]) + m * mean);
            state.running_var[j] =
                static_cast<T>((1.0 - m) * static_cast<double>(state.running_var[j]) + m * unbiased);
        }
    } else {
        for (std::size_t j = 0; j < d; ++j) {
            const double mean = static_cast<double>(state.running_mean[j]);
            const double inv =
                1.0 / std::sqrt(static_cast<double>(state.running_var[j]) + static_cast<double>(state.eps));
            r.cache.inv_std[j] = inv;
            const double g = static_cast<double>(state.gamma[j]);
            const double b = static_cast<double>(state.beta[j]);
            for (std::size_t i = 0; i < n; ++i) {
                const double xh = (static_cast<double>(X(i, j)) - mean) * inv;
                r.cache.x_hat(i, j) = static_cast<T>(xh);
                r.Y(i, j) = static_cast<T>(g * xh + b);
            }
        }
    }
    return r;
}

template <typename T>
struct BatchNormGrads {
    std::vector<T> grad_gamma;
    std::vector<T> grad_beta;
    MatT<T> grad_X;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const MatT<T>& grad_out, const BatchNormCache<T>& cache) {
    const std::size_t n = cache.x_hat.rows(), d = cache.x_hat.cols();
    if (grad_out.rows() != n || grad_out.cols() != d) {
        throw ContractViolationError("batchnorm_backward: grad_out shape does not match cache");
    }
    BatchNormGrads<T> g;
    g.grad_gamma.assign(d, T(0));
    g.grad_beta.assign(d, T(0));
    g.grad_X = MatT<T>(n, d);
    for (std::size_t j = 0; j < d; ++j) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double go = static_cast<double>(grad_out(i, j));
            sum_g += go;
            sum_gx += go * static_cast<double>(cache.x_hat(i, j));
        }
        g.grad_beta[j] = static_cast<T>(sum_g);
        g.grad_gamma[j] = static_cast<T>(sum_gx);
        const double gamma = static_cast<double>(cache.gamma[j]);
        const double inv = cache.inv_std[j];
        if (cache.mode == BnMode::train) {
            const double invn = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double go = static_cast<double>(grad_out(i, j));
                const double xh = static_cast<double>(cache.x_hat(i, j));
                g.grad_X(i, j) =
                    static_cast<T>(gamma * inv * (go - invn * sum_g - invn * xh * sum_gx));
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                g.grad_X(i, j) = static_cast<T>(gamma * inv * static_cast<double>(grad_out(i, j)));
            }
        }
    }
    return g;
}

}  // namespace embd

#endif
