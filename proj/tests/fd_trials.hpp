// Finite-difference gradient trials for every loss and layer kernel, run on
// the double (64-bit shadow) instantiation of the kernels with step 1e-3.
// Configurations are resampled when they land within a small margin of a
// non-differentiable point (hinge boundaries, mining or argmax ties, the
// similarity clip at zero), where central differences are meaningless.
#ifndef EMBDISTILL_TEST_FD_TRIALS_HPP
#define EMBDISTILL_TEST_FD_TRIALS_HPP

#include <functional>
#include <string>
#include <vector>

#include "embdistill/losses.hpp"
#include "embdistill/metrics.hpp"
#include "embdistill/nn.hpp"
#include "embdistill/rng.hpp"
#include "oracles.hpp"

namespace fd {

using embd::Label;
using embd::MatrixD;
using embd::Rng;

constexpr double kStep = 1e-3;
constexpr double kKinkMargin = 1e-2;

struct TrialSummary {
    double max_rel_error = 0.0;
    int trials = 0;
    int resamples = 0;
};

inline void track(TrialSummary& s, const oracle::FdResult& r) {
    s.max_rel_error = std::max(s.max_rel_error, r.rel_error);
}

struct Batch {
    MatrixD emb;
    std::vector<Label> labels;
};

inline Batch random_batch(Rng& rng, std::size_t classes, std::size_t per_class, std::size_t dim,
                          double scale = 1.0) {
    Batch b;
    b.emb = MatrixD(classes * per_class, dim);
    for (auto& v : b.emb.storage()) v = scale * rng.normal();
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) b.labels.push_back(static_cast<Label>(c));
    }
    return b;
}

inline Batch draw_batch(Rng& rng) {
    const std::size_t classes = 2 + rng.next_below(2);
    const std::size_t per_class = 2 + rng.next_below(2);
    const std::size_t dim = 4 + rng.next_below(5);
    return random_batch(rng, classes, per_class, dim);
}

// ---- kink predicates -------------------------------------------------------

inline bool triplet_safe(const Batch& b, double margin) {
    const MatrixD dist = embd::pairwise_squared_dist(b.emb);
    const auto mined = embd::mine_triplets(dist, b.labels);
    const std::size_t n = b.emb.rows();
    for (std::size_t i = 0; i < n; ++i) {
        if (mined.positive[i] < 0 || mined.negative[i] < 0) continue;
        const auto p = static_cast<std::size_t>(mined.positive[i]);
        const auto q = static_cast<std::size_t>(mined.negative[i]);
        if (std::abs(dist(i, p) - dist(i, q) + margin) < kKinkMargin) return false;
        // Mining selection must not sit near a tie.
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i || j == p || b.labels[j] != b.labels[i]) continue;
            if (std::abs(dist(i, j) - dist(i, p)) < kKinkMargin) return false;
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (j == q || b.labels[j] == b.labels[i]) continue;
            if (std::abs(dist(i, j) - dist(i, q)) < kKinkMargin) return false;
        }
    }
    return true;
}

inline bool group_safe(const Batch& b, int iterations) {
    const std::size_t n = b.emb.rows();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(embd::pearson_sim(b.emb.row(i), b.emb.row(j))) < kKinkMargin) {
                return false;
            }
        }
    }
    // Tiny refined probabilities make -log(p) steep enough that the h^2
    // truncation term of central differences dominates at step 1e-3; keep
    // the configurations inside the well-conditioned region.
    const auto anchors = embd::default_anchors(b.labels);
    embd::GroupLossDetail<double> detail;
    embd::group_loss<double>(b.emb, b.labels, anchors, iterations, &detail);
    std::vector<Label> classes;
    for (Label l : b.labels) {
        if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
    }
    std::vector<bool> is_anchor(n, false);
    for (std::size_t a : anchors) is_anchor[a] = true;
    const MatrixD& final_x = detail.assignments.back();
    for (std::size_t i = 0; i < n; ++i) {
        if (is_anchor[i]) continue;
        const auto c = static_cast<std::size_t>(
            std::find(classes.begin(), classes.end(), b.labels[i]) - classes.begin());
        if (final_x(i, c) < 0.2) return false;
    }
    return true;
}

inline bool distance_match_safe(const MatrixD& student, const MatrixD& teacher) {
    const MatrixD ds = embd::pairwise_squared_dist(student);
    const MatrixD dt = embd::pairwise_squared_dist(teacher);
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        for (std::size_t j = i + 1; j < ds.cols(); ++j) {
            if (std::abs(ds(i, j) - dt(i, j)) < kKinkMargin) return false;
        }
    }
    return true;
}

inline bool db_safe(const MatrixD& emb, const std::vector<Label>& labels,
                    const embd::CentroidBankT<double>& bank) {
    // Recompute the per-class ratios and demand a clear argmax.
    std::vector<Label> classes;
    for (Label l : labels) {
        if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
    }
    const std::size_t C = classes.size();
    const std::size_t d_s = bank.projection.rows();
    MatrixD proj(C, d_s);
    for (std::size_t c = 0; c < C; ++c) {
        const std::size_t row = bank.row_of(classes[c]);
        for (std::size_t r = 0; r < d_s; ++r) {
            double acc = 0.0;
            for (std::size_t k = 0; k < bank.centroids.cols(); ++k) {
                acc += bank.projection(r, k) * bank.centroids(row, k);
            }
            proj(c, r) = acc;
        }
    }
    std::vector<double> sigma(C, 0.0);
    std::vector<std::size_t> count(C, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(
            std::find(classes.begin(), classes.end(), labels[i]) - classes.begin());
        sigma[c] += embd::squared_dist(emb.row(i), proj.row(c));
        count[c] += 1;
    }
    for (std::size_t c = 0; c < C; ++c) sigma[c] /= static_cast<double>(count[c]);
    for (std::size_t a = 0; a < C; ++a) {
        double best = -1.0, second = -1.0;
        for (std::size_t b2 = 0; b2 < C; ++b2) {
            if (b2 == a) continue;
            const double dd = embd::squared_dist(proj.row(a), proj.row(b2));
            if (dd < 0.05) return false;
            const double r = (sigma[a] + sigma[b2]) / (dd + 1e-8);
            if (r > best) {
                second = best;
                best = r;
            } else if (r > second) {
                second = r;
            }
        }
        if (C > 2 && best - second < kKinkMargin) return false;
    }
    return true;
}

// ---- per-loss trials -------------------------------------------------------

inline TrialSummary trials_triplet(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    while (s.trials < n_trials) {
        Batch b = draw_batch(rng);
        const double margin = rng.uniform(0.3, 1.2);
        if (!triplet_safe(b, margin)) {
            s.resamples++;
            continue;
        }
        const auto out = embd::triplet_loss<double>(b.emb, b.labels, margin);
        if (out.value == 0.0) continue;  // inactive hinge everywhere: nothing to check
        auto loss = [&]() { return embd::triplet_loss<double>(b.emb, b.labels, margin).value; };
        track(s, oracle::finite_diff_check({b.emb.storage().data(), b.emb.size()},
                                           {out.grad_embeddings.storage().data(),
                                            out.grad_embeddings.size()},
                                           loss, kStep));
        s.trials++;
    }
    return s;
}

inline TrialSummary trials_proxynca(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    while (s.trials < n_trials) {
        Batch b = draw_batch(rng);
        std::vector<Label> classes;
        for (Label l : b.labels) {
            if (std::find(classes.begin(), classes.end(), l) == classes.end())
                classes.push_back(l);
        }
        embd::ProxyBankT<double> bank;
        bank.class_ids = classes;
        bank.proxies = MatrixD(classes.size(), b.emb.cols());
        for (auto& v : bank.proxies.storage()) v = rng.normal();

        const auto out = embd::proxynca_loss<double>(b.emb, b.labels, bank);
        auto loss = [&]() { return embd::proxynca_loss<double>(b.emb, b.labels, bank).value; };
        track(s, oracle::finite_diff_check({b.emb.storage().data(), b.emb.size()},
                                           {out.grad_embeddings.storage().data(),
                                            out.grad_embeddings.size()},
                                           loss, kStep));
        track(s, oracle::finite_diff_check({bank.proxies.storage().data(), bank.proxies.size()},
                                           {out.grad_proxies.storage().data(),
                                            out.grad_proxies.size()},
                                           loss, kStep));
        s.trials++;
    }
    return s;
}

inline TrialSummary trials_normalized_softmax(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    while (s.trials < n_trials) {
        Batch b = draw_batch(rng);
        const double tau = rng.uniform(0.05, 0.5);
        std::vector<Label> classes;
        for (Label l : b.labels) {
            if (std::find(classes.begin(), classes.end(), l) == classes.end())
                classes.push_back(l);
        }
        embd::ProxyBankT<double> bank;
        bank.class_ids = classes;
        bank.proxies = MatrixD(classes.size(), b.emb.cols());
        for (auto& v : bank.proxies.storage()) v = rng.normal();

        const auto out = embd::normalized_softmax_loss<double>(b.emb, b.labels, bank, tau);
        auto loss = [&]() {
            return embd::normalized_softmax_loss<double>(b.emb, b.labels, bank, tau).value;
        };
        track(s, oracle::finite_diff_check({b.emb.storage().data(), b.emb.size()},
                                           {out.grad_embeddings.storage().data(),
                                            out.grad_embeddings.size()},
                                           loss, kStep));
        track(s, oracle::finite_diff_check({bank.proxies.storage().data(), bank.proxies.size()},
                                           {out.grad_proxies.storage().data(),
                                            out.grad_proxies.size()},
                                           loss, kStep));
        s.trials++;
    }
    return s;
}

inline TrialSummary trials_group(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    while (s.trials < n_trials) {
        Batch b = draw_batch(rng);
        const int iterations = 1 + static_cast<int>(rng.next_below(3));
        if (!group_safe(b, iterations)) {
            s.resamples++;
            continue;
        }
        const auto anchors = embd::default_anchors(b.labels);
        const auto out = embd::group_loss<double>(b.emb, b.labels, anchors, iterations);
        auto loss = [&]() {
            return embd::group_loss<double>(b.emb, b.labels, anchors, iterations).value;
        };
        track(s, oracle::finite_diff_check({b.emb.storage().data(), b.emb.size()},
                                           {out.grad_embeddings.storage().data(),
                                            out.grad_embeddings.size()},
                                           loss, kStep));
        s.trials++;
    }
    return s;
}

inline TrialSummary trials_distance_match(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    while (s.trials < n_trials) {
        Batch b = draw_batch(rng);
        MatrixD teacher(b.emb.rows(), 4 + rng.next_below(8));
        for (auto& v : teacher.storage()) v = rng.normal();
        if (!distance_match_safe(b.emb, teacher)) {
            s.resamples++;
            continue;
        }
        const auto out = embd::distance_matching_loss<double>(b.emb, teacher);
        auto loss = [&]() { return embd::distance_matching_loss<double>(b.emb, teacher).value; };
        track(s, oracle::finite_diff_check({b.emb.storage().data(), b.emb.size()},
                                           {out.grad_embeddings.storage().data(),
                                            out.grad_embeddings.size()},
                                           loss, kStep));
        s.trials++;
    }
    return s;
}

inline TrialSummary trials_db_cluster(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    while (s.trials < n_trials) {
        Batch b = draw_batch(rng);
        std::vector<Label> classes;
        for (Label l : b.labels) {
            if (std::find(classes.begin(), classes.end(), l) == classes.end())
                classes.push_back(l);
        }
        embd::CentroidBankT<double> bank;
        bank.class_ids = classes;
        const std::size_t d_teacher = 6 + rng.next_below(4);
        bank.centroids = MatrixD(classes.size(), d_teacher);
        for (auto& v : bank.centroids.storage()) v = rng.normal();
        bank.projection = MatrixD(b.emb.cols(), d_teacher);
        for (auto& v : bank.projection.storage()) v = 0.5 * rng.normal();
        if (!db_safe(b.emb, b.labels, bank)) {
            s.resamples++;
            continue;
        }

        const auto out = embd::db_cluster_loss<double>(b.emb, b.labels, bank);
        auto loss = [&]() { return embd::db_cluster_loss<double>(b.emb, b.labels, bank).value; };
        track(s, oracle::finite_diff_check({b.emb.storage().data(), b.emb.size()},
                                           {out.grad_embeddings.storage().data(),
                                            out.grad_embeddings.size()},
                                           loss, kStep));
        track(s, oracle::finite_diff_check(
                     {bank.projection.storage().data(), bank.projection.size()},
                     {out.grad_projection.storage().data(), out.grad_projection.size()}, loss,
                     kStep));
        s.trials++;
    }
    return s;
}

// ---- layer kernels ---------------------------------------------------------

inline TrialSummary trials_linear(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    for (int t = 0; t < n_trials; ++t) {
        const std::size_t n = 2 + rng.next_below(5);
        const std::size_t d_in = 2 + rng.next_below(5);
        const std::size_t d_out = 1 + rng.next_below(4);
        MatrixD W(d_out, d_in), X(n, d_in), target(n, d_out);
        std::vector<double> bias(d_out);
        for (auto& v : W.storage()) v = rng.normal();
        for (auto& v : X.storage()) v = rng.normal();
        for (auto& v : target.storage()) v = rng.normal();
        for (auto& v : bias) v = rng.normal();

        auto loss = [&]() {
            const auto y = embd::linear_apply<double>(W, {bias.data(), bias.size()}, X);
            double acc = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) {
                const double d = y.storage()[i] - target.storage()[i];
                acc += d * d;
            }
            return acc;
        };
        auto fwd = embd::linear_forward<double>(W, {bias.data(), bias.size()}, X);
        MatrixD go(n, d_out);
        for (std::size_t i = 0; i < go.size(); ++i) {
            go.storage()[i] = 2.0 * (fwd.Y.storage()[i] - target.storage()[i]);
        }
        const auto g = embd::linear_backward<double>(go, fwd.cache);
        track(s, oracle::finite_diff_check({W.storage().data(), W.size()},
                                           {g.grad_W.storage().data(), g.grad_W.size()}, loss,
                                           kStep));
        track(s, oracle::finite_diff_check({bias.data(), bias.size()},
                                           {g.grad_b.data(), g.grad_b.size()}, loss, kStep));
        track(s, oracle::finite_diff_check({X.storage().data(), X.size()},
                                           {g.grad_X.storage().data(), g.grad_X.size()}, loss,
                                           kStep));
        s.trials++;
    }
    return s;
}

inline TrialSummary trials_batchnorm(int n_trials, std::uint64_t seed) {
    TrialSummary s;
    Rng rng(seed);
    for (int t = 0; t < n_trials; ++t) {
        const std::size_t n = 4 + rng.next_below(6);
        const std::size_t d = 2 + rng.next_below(4);
        MatrixD X(n, d), target(n, d);
        std::vector<double> gamma(d), beta(d);
        for (auto& v : X.storage()) v = rng.normal();
        for (auto& v : target.storage()) v = rng.normal();
        for (auto& v : gamma) v = rng.uniform(0.5, 2.0);
        for (auto& v : beta) v = rng.normal();

        auto run = [&](bool want_cache, embd::BatchNormCache<double>* cache_out,
                       MatrixD* y_out) {
            embd::BatchNormStateT<double> st;
            st.gamma = gamma;
            st.beta = beta;
            st.running_mean.assign(d, 0.0);
            st.running_var.assign(d, 1.0);
            st.mode = embd::BnMode::train;
            auto r = embd::batchnorm_forward<double>(X, st);
            if (want_cache) {
                *cache_out = std::move(r.cache);
                *y_out = std::move(r.Y);
                return 0.0;
            }
            double acc = 0.0;
            for (std::size_t i = 0; i < r.Y.size(); ++i) {
                const double dd = r.Y.storage()[i] - target.storage()[i];
                acc += dd * dd;
            }
            return acc;
        };
        auto loss = [&]() { return run(false, nullptr, nullptr); };

        embd::BatchNormCache<double> cache;
        MatrixD Y;
        run(true, &cache, &Y);
        MatrixD go(n, d);
        for (std::size_t i = 0; i < go.size(); ++i) {
            go.storage()[i] = 2.0 * (Y.storage()[i] - target.storage()[i]);
        }
        const auto g = embd::batchnorm_backward<double>(go, cache);
        track(s, oracle::finite_diff_check({X.storage().data(), X.size()},
                                           {g.grad_X.storage().data(), g.grad_X.size()}, loss,
                                           kStep));
        track(s, oracle::finite_diff_check({gamma.data(), gamma.size()},
                                           {g.grad_gamma.data(), g.grad_gamma.size()}, loss,
                                           kStep));
        track(s, oracle::finite_diff_check({beta.data(), beta.size()},
                                           {g.grad_beta.data(), g.grad_beta.size()}, loss, kStep));
        s.trials++;
    }
    return s;
}

}  // namespace fd

#endif
