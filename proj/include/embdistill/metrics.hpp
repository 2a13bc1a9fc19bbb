#ifndef EMBDISTILL_METRICS_HPP
#define EMBDISTILL_METRICS_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "embdistill/errors.hpp"
#include "embdistill/matrix.hpp"

namespace embd {

namespace detail {

template <typename T>
inline void require_same_length(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) {
        throw DimensionError("vector length mismatch: " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
    }
    if (a.empty()) throw DimensionError("vectors must have length >= 1");
}

}  // namespace detail

// Normalized squared Euclidean distance: (1/d) * ||a - b||^2.
// 64-bit accumulation regardless of storage type.
template <typename T>
double squared_dist(std::span<const T> a, std::span<const T> b) {
    detail::require_same_length(a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += diff * diff;
    }
    return acc / static_cast<double>(a.size());
}

template <typename T>
double dot64(std::span<const T> a, std::span<const T> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return acc;
}

template <typename T>
double norm64(std::span<const T> a) {
    return std::sqrt(dot64(a, a));
}

template <typename T>
double cosine_sim(std::span<const T> a, std::span<const T> b) {
    detail::require_same_length(a, b);
    const double na = norm64(a);
    const double nb = norm64(b);
    if (na == 0.0 || nb == 0.0) {
        throw DegenerateInputError("cosine_sim: zero-norm input");
    }
    return dot64(a, b) / (na * nb);
}

// d(cos)/da and d(cos)/db for s = <a,b> / (|a||b|). Gradients are written
// into the provided spans (accumulated with the given scale).
template <typename T>
void cosine_sim_backward(std::span<const T> a, std::span<const T> b, double upstream,
                         std::span<T> grad_a, std::span<T> grad_b) {
    const double na = norm64(a);
    const double nb = norm64(b);
    const double s = dot64(a, b) / (na * nb);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double ai = static_cast<double>(a[i]) / na;
        const double bi = static_cast<double>(b[i]) / nb;
        grad_a[i] += static_cast<T>(upstream * (bi - s * ai) / na);
        grad_b[i] += static_cast<T>(upstream * (ai - s * bi) / nb);
    }
}

// Pearson correlation coefficient.
template <typename T>
double pearson_sim(std::span<const T> a, std::span<const T> b) {
    detail::require_same_length(a, b);
    const std::size_t d = a.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        ma += static_cast<double>(a[i]);
        mb += static_cast<double>(b[i]);
    }
    ma /= static_cast<double>(d);
    mb /= static_cast<double>(d);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double ca = static_cast<double>(a[i]) - ma;
        const double cb = static_cast<double>(b[i]) - mb;
        sab += ca * cb;
        saa += ca * ca;
        sbb += cb * cb;
    }
    if (saa == 0.0 || sbb == 0.0) {
        throw DegenerateInputError("pearson_sim: zero-variance input");
    }
    return sab / std::sqrt(saa * sbb);
}

// Forwarding overloads so calls with mutable row spans deduce cleanly.
template <typename T>
double squared_dist(std::span<T> a, std::span<T> b) {
    return squared_dist(std::span<const T>(a), std::span<const T>(b));
}
template <typename T>
double squared_dist(std::span<const T> a, std::span<T> b) {
    return squared_dist(a, std::span<const T>(b));
}
template <typename T>
double squared_dist(std::span<T> a, std::span<const T> b) {
    return squared_dist(std::span<const T>(a), b);
}
template <typename T>
double cosine_sim(std::span<T> a, std::span<T> b) {
    return cosine_sim(std::span<const T>(a), std::span<const T>(b));
}
template <typename T>
double pearson_sim(std::span<T> a, std::span<T> b) {
    return pearson_sim(std::span<const T>(a), std::span<const T>(b));
}

// Gradient of pearson_sim. The centered gradients already have zero mean, so
// no extra projection is needed.
template <typename T>
void pearson_sim_backward(std::span<const T> a, std::span<const T> b, double upstream,
                          std::span<T> grad_a, std::span<T> grad_b) {
    const std::size_t d = a.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        ma += static_cast<double>(a[i]);
        mb += static_cast<double>(b[i]);
    }
    ma /= static_cast<double>(d);
    mb /= static_cast<double>(d);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double ca = static_cast<double>(a[i]) - ma;
        const double cb = static_cast<double>(b[i]) - mb;
        sab += ca * cb;
        saa += ca * ca;
        sbb += cb * cb;
    }
    const double na = std::sqrt(saa);
    const double nb = std::sqrt(sbb);
    const double rho = sab / (na * nb);
    for (std::size_t i = 0; i < d; ++i) {
        const double ca = static_cast<double>(a[i]) - ma;
        const double cb = static_cast<double>(b[i]) - mb;
        grad_a[i] += static_cast<T>(upstream * (cb / (na * nb) - rho * ca / saa));
        grad_b[i] += static_cast<T>(upstream * (ca / (na * nb) - rho * cb / sbb));
    }
}

// In-batch pairwise squared_dist matrix (B x B, double precision).
template <typename T>
MatrixD pairwise_squared_dist(const MatT<T>& emb) {
    const std::size_t n = emb.rows();
    MatrixD dist(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        dist(i, i) = 0.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = squared_dist(emb.row(i), emb.row(j));
            dist(i, j) = v;
            dist(j, i) = v;
        }
    }
    return dist;
}

}  // namespace embd

#endif
