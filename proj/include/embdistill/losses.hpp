#ifndef EMBDISTILL_LOSSES_HPP
#define EMBDISTILL_LOSSES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "embdistill/errors.hpp"
#include "embdistill/matrix.hpp"
#include "embdistill/metrics.hpp"

namespace embd {

using Label = std::int32_t;

// Per-call diagnostics. Counted, never thrown.
struct LossStats {
    std::size_t skipped_anchors = 0;
    std::size_t stabilized_denominators = 0;
};

// Scalar value plus a gradient per trainable input. Unused slots stay empty.
template <typename T>
struct LossOutputT {
    double value = 0.0;
    MatT<T> grad_embeddings;
    MatT<T> grad_proxies;
    MatT<T> grad_projection;
    LossStats stats;
};

using LossOutput = LossOutputT<float>;

// One trainable proxy vector per training class.
template <typename T>
struct ProxyBankT {
    MatT<T> proxies;               // C x d
    std::vector<Label> class_ids;  // row -> class

    std::size_t row_of(Label label) const {
        for (std::size_t i = 0; i < class_ids.size(); ++i) {
            if (class_ids[i] == label) return i;
        }
        throw ConfigError("proxy bank has no proxy for class " + std::to_string(label));
    }
};

using ProxyBank = ProxyBankT<float>;

// Frozen teacher-space class centroids plus the trainable projection that
// maps them into the student space.
template <typename T>
struct CentroidBankT {
    MatT<T> centroids;             // C x d_teacher, frozen
    MatT<T> projection;            // d_student x d_teacher, trainable
    std::vector<Label> class_ids;  // row -> class

    std::size_t row_of(Label label) const {
        for (std::size_t i = 0; i < class_ids.size(); ++i) {
            if (class_ids[i] == label) return i;
        }
        throw ConfigError("centroid bank has no centroid for class " + std::to_string(label));
    }
};

using CentroidBank = CentroidBankT<float>;

namespace detail {

// d(squared_dist)/da accumulated into grad_a, grad_b with upstream weight.
template <typename T>
inline void squared_dist_backward(std::span<const T> a, std::span<const T> b, double upstream,
                                  std::span<T> grad_a, std::span<T> grad_b) {
    const double scale = upstream * 2.0 / static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        grad_a[i] += static_cast<T>(scale * diff);
        grad_b[i] -= static_cast<T>(scale * diff);
    }
}

inline void require_labels(std::size_t n, const std::vector<Label>& labels) {
    if (labels.size() != n) {
        throw DimensionError("labels length " + std::to_string(labels.size()) +
                             " != batch size " + std::to_string(n));
    }
}

// Unique labels in order of first appearance.
inline std::vector<Label> batch_classes(const std::vector<Label>& labels) {
    std::vector<Label> classes;
    for (Label l : labels) {
        if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
    }
    return classes;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Hard-positive / hard-negative triplet mining.
// Positive: same-class sample at maximal distance (self excluded).
// Negative: different-class sample at minimal distance.
// Ties broken by lowest index. Anchors without a positive or negative get -1.
// ---------------------------------------------------------------------------

struct MinedTriplets {
    std::vector<std::ptrdiff_t> positive;  // -1 when invalid
    std::vector<std::ptrdiff_t> negative;
};

inline MinedTriplets mine_triplets(const MatrixD& dist, const std::vector<Label>& labels) {
    const std::size_t n = dist.rows();
    if (dist.cols() != n) throw DimensionError("mine_triplets: distance matrix must be square");
    detail::require_labels(n, labels);
    MinedTriplets m;
    m.positive.assign(n, -1);
    m.negative.assign(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        double best_pos = -1.0;
        double best_neg = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dij = dist(i, j);
            if (labels[j] == labels[i]) {
                if (dij > best_pos) {
                    best_pos = dij;
                    m.positive[i] = static_cast<std::ptrdiff_t>(j);
                }
            } else {
                if (dij < best_neg) {
                    best_neg = dij;
                    m.negative[i] = static_cast<std::ptrdiff_t>(j);
                }
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Triplet loss with hinge margin: mean over valid anchors of
// max(D(v_i, v_+) - D(v_i, v_-) + m, 0).
// ---------------------------------------------------------------------------

template <typename T>
LossOutputT<T> triplet_loss(const MatT<T>& emb, const std::vector<Label>& labels, double margin) {
    const std::size_t n = emb.rows();
    detail::require_labels(n, labels);
    require_finite(emb, "triplet_loss embeddings");

    const MatrixD dist = pairwise_squared_dist(emb);
    const MinedTriplets mined = mine_triplets(dist, labels);

    LossOutputT<T> out;
    out.grad_embeddings = MatT<T>(n, emb.cols());

    std::size_t valid = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mined.positive[i] >= 0 && mined.negative[i] >= 0) ++valid;
    }
    out.stats.skipped_anchors = n - valid;
    if (valid == 0) {
        out.value = 0.0;
        return out;
    }

    const double inv_valid = 1.0 / static_cast<double>(valid);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mined.positive[i] < 0 || mined.negative[i] < 0) continue;
        const auto p = static_cast<std::size_t>(mined.positive[i]);
        const auto q = static_cast<std::size_t>(mined.negative[i]);
        const double hinge = dist(i, p) - dist(i, q) + margin;
        if (hinge > 0.0) {
            total += hinge;
            detail::squared_dist_backward<T>(emb.row(i), emb.row(p), inv_valid,
                                             out.grad_embeddings.row(i),
                                             out.grad_embeddings.row(p));
            detail::squared_dist_backward<T>(emb.row(i), emb.row(q), -inv_valid,
                                             out.grad_embeddings.row(i),
                                             out.grad_embeddings.row(q));
        }
    }
    out.value = total * inv_valid;
    return out;
}

// ---------------------------------------------------------------------------
// ProxyNCA: -log( exp(-D(v,y)) / sum_{z in Z} exp(-D(v,z)) ) where Z excludes
// the positive proxy, so the loss can be negative. Gradients flow to both
// embeddings and proxies.
// ---------------------------------------------------------------------------

template <typename T>
LossOutputT<T> proxynca_loss(const MatT<T>& emb, const std::vector<Label>& labels,
                             const ProxyBankT<T>& bank) {
    const std::size_t n = emb.rows();
    detail::require_labels(n, labels);
    require_finite(emb, "proxynca embeddings");
    require_finite(bank.proxies, "proxynca proxies");
    if (bank.proxies.cols() != emb.cols()) {
        throw DimensionError("proxynca: proxy dim != embedding dim");
    }
    const std::size_t C = bank.proxies.rows();
    if (C < 2) throw ConfigError("proxynca needs at least 2 classes in the proxy bank");

    LossOutputT<T> out;
    out.grad_embeddings = MatT<T>(n, emb.cols());
    out.grad_proxies = MatT<T>(C, emb.cols());

    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    std::vector<double> d(C), p(C);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = bank.row_of(labels[i]);
        double max_neg = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) {
            d[c] = squared_dist(emb.row(i), bank.proxies.row(c));
            if (c != y) max_neg = std::max(max_neg, -d[c]);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            if (c == y) continue;
            p[c] = std::exp(-d[c] - max_neg);
            denom += p[c];
        }
        const double lse = max_neg + std::log(denom);
        total += d[y] + lse;

        // dL/dD_y = 1, dL/dD_z = -softmax_z over the negative proxies.
        detail::squared_dist_backward<T>(emb.row(i), bank.proxies.row(y), inv_n,
                                         out.grad_embeddings.row(i), out.grad_proxies.row(y));
        for (std::size_t c = 0; c < C; ++c) {
            if (c == y) continue;
            const double w = -(p[c] / denom) * inv_n;
            detail::squared_dist_backward<T>(emb.row(i), bank.proxies.row(c), w,
                                             out.grad_embeddings.row(i), out.grad_proxies.row(c));
        }
    }
    out.value = total * inv_n;
    return out;
}

// ---------------------------------------------------------------------------
// NormalizedSoftmax: cross-entropy over cosine similarities to all proxies at
// temperature tau. The denominator includes the positive proxy, so the loss
// is non-negative.
// ---------------------------------------------------------------------------

template <typename T>
LossOutputT<T> normalized_softmax_loss(const MatT<T>& emb, const std::vector<Label>& labels,
                                       const ProxyBankT<T>& bank, double tau) {
    const std::size_t n = emb.rows();
    detail::require_labels(n, labels);
    require_finite(emb, "normalized_softmax embeddings");
    require_finite(bank.proxies, "normalized_softmax proxies");
    if (bank.proxies.cols() != emb.cols()) {
        throw DimensionError("normalized_softmax: proxy dim != embedding dim");
    }
    if (tau <= 0.0) throw ConfigError("normalized_softmax: tau must be > 0");
    const std::size_t C = bank.proxies.rows();

    LossOutputT<T> out;
    out.grad_embeddings = MatT<T>(n, emb.cols());
    out.grad_proxies = MatT<T>(C, emb.cols());

    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    std::vector<double> logits(C), p(C);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = bank.row_of(labels[i]);
        double max_l = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) {
            logits[c] = cosine_sim(emb.row(i), bank.proxies.row(c)) / tau;
            max_l = std::max(max_l, logits[c]);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            p[c] = std::exp(logits[c] - max_l);
            denom += p[c];
        }
        total += -(logits[y] - max_l) + std::log(denom);

        for (std::size_t c = 0; c < C; ++c) {
            const double soft = p[c] / denom;
            const double upstream = ((c == y) ? soft - 1.0 : soft) / tau * inv_n;
            cosine_sim_backward<T>(emb.row(i), bank.proxies.row(c), upstream,
                                   out.grad_embeddings.row(i), out.grad_proxies.row(c));
        }
    }
    out.value = total * inv_n;
    return out;
}

// ---------------------------------------------------------------------------
// Group loss. Pairwise Pearson similarities with negatives clipped to 0 and a
// zeroed diagonal drive replicator-dynamics refinement of per-sample class
// probabilities; anchors stay one-hot, non-anchors start uniform. The loss is
// the log loss of the refined probabilities over non-anchor samples, and the
// gradient is taken through the unrolled iterations.
// ---------------------------------------------------------------------------

// First sample of each class in batch order.
inline std::vector<std::size_t> default_anchors(const std::vector<Label>& labels) {
    std::vector<std::size_t> anchors;
    std::vector<Label> seen;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (std::find(seen.begin(), seen.end(), labels[i]) == seen.end()) {
            seen.push_back(labels[i]);
            anchors.push_back(i);
        }
    }
    return anchors;
}

template <typename T>
struct GroupLossDetail {
    std::vector<MatrixD> assignments;  // X^0 .. X^T, rows sum to 1
    MatrixD similarity;                // clipped Pearson matrix W
};

template <typename T>
LossOutputT<T> group_loss(const MatT<T>& emb, const std::vector<Label>& labels,
                          const std::vector<std::size_t>& anchors, int iterations,
                          GroupLossDetail<T>* detail_out = nullptr) {
    const std::size_t n = emb.rows();
    detail::require_labels(n, labels);
    require_finite(emb, "group_loss embeddings");
    if (iterations < 0) throw ConfigError("group_loss: iterations must be >= 0");

    const std::vector<Label> classes = detail::batch_classes(labels);
    const std::size_t C = classes.size();

    // Every class needs exactly one anchor.
    std::vector<std::ptrdiff_t> anchor_of_class(C, -1);
    std::vector<bool> is_anchor(n, false);
    for (std::size_t a : anchors) {
        if (a >= n) throw ConfigError("group_loss: anchor index out of range");
        const auto cls = static_cast<std::size_t>(
            std::find(classes.begin(), classes.end(), labels[a]) - classes.begin());
        if (anchor_of_class[cls] >= 0) {
            throw ConfigError("group_loss: class " + std::to_string(labels[a]) +
                              " has more than one anchor");
        }
        anchor_of_class[cls] = static_cast<std::ptrdiff_t>(a);
        is_anchor[a] = true;
    }
    for (std::size_t c = 0; c < C; ++c) {
        if (anchor_of_class[c] < 0) {
            throw ConfigError("group_loss: class " + std::to_string(classes[c]) +
                              " has no anchor");
        }
    }
    std::vector<std::size_t> class_of(n);
    for (std::size_t i = 0; i < n; ++i) {
        class_of[i] = static_cast<std::size_t>(
            std::find(classes.begin(), classes.end(), labels[i]) - classes.begin());
    }

    LossOutputT<T> out;
    out.grad_embeddings = MatT<T>(n, emb.cols());

    // Similarity matrix: Pearson, negatives clipped to 0, zero diagonal.
    MatrixD rho(n, n);
    MatrixD W(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double r = pearson_sim(emb.row(i), emb.row(j));
            rho(i, j) = r;
            rho(j, i) = r;
            const double w = r > 0.0 ? r : 0.0;
            W(i, j) = w;
            W(j, i) = w;
        }
    }

    constexpr double kDenomEps = 1e-12;
    constexpr double kLogClamp = 1e-12;

    // Forward replicator iterations, keeping every assignment matrix.
    std::vector<MatrixD> xs;
    xs.reserve(static_cast<std::size_t>(iterations) + 1);
    MatrixD X0(n, C);
    for (std::size_t i = 0; i < n; ++i) {
        if (is_anchor[i]) {
            X0(i, class_of[i]) = 1.0;
        } else {
            for (std::size_t c = 0; c < C; ++c) X0(i, c) = 1.0 / static_cast<double>(C);
        }
    }
    xs.push_back(X0);
    std::vector<MatrixD> supports;  // Pi^t = W * X^t
    std::vector<std::vector<double>> denoms;
    for (int t = 0; t < iterations; ++t) {
        const MatrixD& X = xs.back();
        MatrixD Pi(n, C);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += W(i, j) * X(j, c);
                Pi(i, c) = acc;
            }
        }
        MatrixD Xn = X;
        std::vector<double> denom(n, 1.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (is_anchor[i]) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) s += X(i, c) * Pi(i, c);
            if (s <= kDenomEps) {
                // No similarity support: leave the row unchanged.
                out.stats.stabilized_denominators++;
                denom[i] = -1.0;  // marker: identity step
                continue;
            }
            denom[i] = s;
            for (std::size_t c = 0; c < C; ++c) Xn(i, c) = X(i, c) * Pi(i, c) / s;
        }
        supports.push_back(std::move(Pi));
        denoms.push_back(std::move(denom));
        xs.push_back(std::move(Xn));
    }

    // Log loss over non-anchor samples.
    std::size_t n_na = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!is_anchor[i]) ++n_na;
    }
    const MatrixD& XT = xs.back();
    double total = 0.0;
    MatrixD gX(n, C);  // gradient wrt X^T
    if (n_na > 0) {
        const double inv_na = 1.0 / static_cast<double>(n_na);
        for (std::size_t i = 0; i < n; ++i) {
            if (is_anchor[i]) continue;
            const double prob = XT(i, class_of[i]);
            total += -std::log(std::max(prob, kLogClamp)) * inv_na;
            if (prob > kLogClamp) gX(i, class_of[i]) = -inv_na / prob;
        }
    }
    out.value = total;

    // Backward through the unrolled iterations. gW accumulates; the gradient
    // into X^0 is dropped (the initialization is constant).
    MatrixD gW(n, n);
    for (int t = iterations - 1; t >= 0; --t) {
        const MatrixD& X = xs[static_cast<std::size_t>(t)];
        const MatrixD& Xn = xs[static_cast<std::size_t>(t) + 1];
        const MatrixD& Pi = supports[static_cast<std::size_t>(t)];
        const std::vector<double>& denom = denoms[static_cast<std::size_t>(t)];
        MatrixD gPi(n, C);
        MatrixD gX_prev(n, C);
        for (std::size_t i = 0; i < n; ++i) {
            if (is_anchor[i] || denom[i] < 0.0) {
                // Identity step: pass the gradient straight through.
                for (std::size_t c = 0; c < C; ++c) gX_prev(i, c) = gX(i, c);
                continue;
            }
            double inner = 0.0;  // sum_c gX_c * Xn_c
            for (std::size_t c = 0; c < C; ++c) inner += gX(i, c) * Xn(i, c);
            for (std::size_t c = 0; c < C; ++c) {
                const double gu = (gX(i, c) - inner) / denom[i];
                gPi(i, c) = gu * X(i, c);
                gX_prev(i, c) = gu * Pi(i, c);
            }
        }
        // Pi = W X:  gW += gPi X^T,  gX += W^T gPi.
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < C; ++c) acc += gPi(i, c) * X(j, c);
                gW(i, j) += acc;
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += W(i, j) * gPi(i, c);
                gX_prev(j, c) += acc;
            }
        }
        gX = std::move(gX_prev);
    }

    // W -> Pearson: clip gate, zero diagonal.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            if (rho(i, j) <= 0.0) continue;
            const double up = gW(i, j);
            if (up == 0.0) continue;
            pearson_sim_backward<T>(emb.row(i), emb.row(j), up, out.grad_embeddings.row(i),
                                    out.grad_embeddings.row(j));
        }
    }

    if (detail_out) {
        detail_out->assignments = std::move(xs);
        detail_out->similarity = std::move(W);
    }
    return out;
}

template <typename T>
LossOutputT<T> group_loss(const MatT<T>& emb, const std::vector<Label>& labels, int iterations) {
    return group_loss(emb, labels, default_anchors(labels), iterations);
}

// ---------------------------------------------------------------------------
// Distance matching: per anchor i, sum_j |D(v_i^s, v_j^s) - D(v_i^t, v_j^t)|,
// averaged over the batch. Each model uses its own dimensionality inside D.
// The teacher side receives no gradient.
// ---------------------------------------------------------------------------

template <typename T>
LossOutputT<T> distance_matching_loss(const MatT<T>& student_emb, const MatT<T>& teacher_emb) {
    const std::size_t n = student_emb.rows();
    if (teacher_emb.rows() != n) {
        throw DimensionError("distance_matching: student rows " + std::to_string(n) +
                             " != teacher rows " + std::to_string(teacher_emb.rows()));
    }
    require_finite(student_emb, "distance_matching student embeddings");
    require_finite(teacher_emb, "distance_matching teacher embeddings");

    const MatrixD ds = pairwise_squared_dist(student_emb);
    const MatrixD dt = pairwise_squared_dist(teacher_emb);

    LossOutputT<T> out;
    out.grad_embeddings = MatT<T>(n, student_emb.cols());
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double delta = ds(i, j) - dt(i, j);
            total += std::abs(delta) * inv_n;
            const double sign = delta > 0.0 ? 1.0 : (delta < 0.0 ? -1.0 : 0.0);
            if (sign != 0.0) {
                detail::squared_dist_backward<T>(student_emb.row(i), student_emb.row(j),
                                                 sign * inv_n, out.grad_embeddings.row(i),
                                                 out.grad_embeddings.row(j));
            }
        }
    }
    out.value = total;
    return out;
}

// ---------------------------------------------------------------------------
// Davies-Bouldin cluster-matching loss. Intra-class spreads are measured
// against the projected teacher centroids using only in-batch members; the
// per-class scores max_{j != i} (sigma_i + sigma_j) / D(c_i, c_j) are
// averaged. Gradients flow to the embeddings and the centroid projection.
// ---------------------------------------------------------------------------

template <typename T>
LossOutputT<T> db_cluster_loss(const MatT<T>& student_emb, const std::vector<Label>& labels,
                               const CentroidBankT<T>& bank) {
    const std::size_t n = student_emb.rows();
    detail::require_labels(n, labels);
    require_finite(student_emb, "db_cluster student embeddings");
    const std::size_t d_s = student_emb.cols();
    const std::size_t d_t = bank.centroids.cols();
    if (bank.projection.rows() != d_s || bank.projection.cols() != d_t) {
        throw DimensionError("db_cluster: projection must be d_student x d_teacher");
    }

    const std::vector<Label> classes = detail::batch_classes(labels);
    const std::size_t C = classes.size();
    if (C < 2) throw ConfigError("db_cluster needs >= 2 classes in the batch");

    std::vector<std::size_t> bank_row(C);
    std::vector<std::vector<std::size_t>> members(C);
    for (std::size_t c = 0; c < C; ++c) bank_row[c] = bank.row_of(classes[c]);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::size_t>(
            std::find(classes.begin(), classes.end(), labels[i]) - classes.begin());
        members[c].push_back(i);
    }

    // Projected centroids c_i = P t_i.
    MatT<T> proj(C, d_s);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t r = 0; r < d_s; ++r) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d_t; ++k) {
                acc += static_cast<double>(bank.projection(r, k)) *
                       static_cast<double>(bank.centroids(bank_row[c], k));
            }
            proj(c, r) = static_cast<T>(acc);
        }
    }

    // sigma per class over in-batch members.
    std::vector<double> sigma(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t m : members[c]) {
            sigma[c] += squared_dist(student_emb.row(m), crow(proj, c));
        }
        sigma[c] /= static_cast<double>(members[c].size());
    }

    constexpr double kEps = 1e-8;
    MatrixD cd(C, C);
    LossOutputT<T> out;
    out.grad_embeddings = MatT<T>(n, d_s);
    out.grad_projection = MatT<T>(d_s, d_t);
    MatT<T> grad_centroid(C, d_s);  // gradient wrt projected centroids

    for (std::size_t a = 0; a < C; ++a) {
        for (std::size_t b = a + 1; b < C; ++b) {
            const double v = squared_dist(crow(proj, a), crow(proj, b));
            cd(a, b) = v;
            cd(b, a) = v;
        }
    }

    std::vector<double> grad_sigma(C, 0.0);
    const double inv_c = 1.0 / static_cast<double>(C);
    double total = 0.0;
    for (std::size_t a = 0; a < C; ++a) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_b = 0;
        for (std::size_t b = 0; b < C; ++b) {
            if (b == a) continue;
            const double r = (sigma[a] + sigma[b]) / (cd(a, b) + kEps);
            if (r > best) {
                best = r;
                best_b = b;
            }
        }
        total += best * inv_c;
        if (cd(a, best_b) < kEps) out.stats.stabilized_denominators++;

        const double denom = cd(a, best_b) + kEps;
        grad_sigma[a] += inv_c / denom;
        grad_sigma[best_b] += inv_c / denom;
        const double gd = -inv_c * (sigma[a] + sigma[best_b]) / (denom * denom);
        // D(c_a, c_b) backward into the projected centroids.
        detail::squared_dist_backward<T>(
            std::span<const T>(proj.row(a)), std::span<const T>(proj.row(best_b)), gd,
            grad_centroid.row(a), grad_centroid.row(best_b));
    }
    out.value = total;

    // sigma backward: members and projected centroid.
    for (std::size_t c = 0; c < C; ++c) {
        if (grad_sigma[c] == 0.0) continue;
        const double w = grad_sigma[c] / static_cast<double>(members[c].size());
        for (std::size_t m : members[c]) {
            detail::squared_dist_backward<T>(
                std::span<const T>(student_emb.row(m)), std::span<const T>(proj.row(c)), w,
                out.grad_embeddings.row(m), grad_centroid.row(c));
        }
    }

    // Projected centroids -> projection weights: gP += g_c outer t.
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t r = 0; r < d_s; ++r) {
            const double g = static_cast<double>(grad_centroid(c, r));
            if (g == 0.0) continue;
            for (std::size_t k = 0; k < d_t; ++k) {
                out.grad_projection(r, k) +=
                    static_cast<T>(g * static_cast<double>(bank.centroids(bank_row[c], k)));
            }
        }
    }
    return out;
}

}  // namespace embd

#endif
