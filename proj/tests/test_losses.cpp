#include <cmath>

#include "doctest.h"
#include "embdistill/losses.hpp"
#include "embdistill/rng.hpp"
#include "fd_trials.hpp"
#include "oracles.hpp"

using namespace embd;

namespace {

// Places points so squared_dist comes out exactly as requested (d = 1).
Matrix points_1d(std::initializer_list<float> xs) {
    Matrix m(xs.size(), 1);
    std::size_t i = 0;
    for (float x : xs) m(i++, 0) = x;
    return m;
}

}  // namespace

TEST_CASE("triplet loss hand examples") {
    // Anchor 0 (class 0) with positive at D=0.2 and negative at D=0.5:
    // loss contribution max(0.2 - 0.5 + 1, 0) = 0.7.
    // d = 1, so D(a, b) = (a-b)^2.
    const Matrix emb = points_1d({0.0f, std::sqrt(0.2f), std::sqrt(0.5f)});
    const std::vector<Label> labels{0, 0, 1};
    const auto out = triplet_loss<float>(emb, labels, 1.0);
    // Anchor 0: D+ = 0.2, D- = 0.5 -> 0.7
    // Anchor 1: D+ = 0.2, D- = (sqrt(0.5)-sqrt(0.2))^2 ~= 0.0316 -> 1.1683...
    // Anchor 2: no positive -> skipped.
    const double d_neg1 = std::pow(std::sqrt(0.5) - std::sqrt(0.2), 2.0);
    const double expected = (0.7 + (0.2 - d_neg1 + 1.0)) / 2.0;
    CHECK(out.value == doctest::Approx(expected).epsilon(1e-5));
    CHECK(out.stats.skipped_anchors == 1);
}

TEST_CASE("triplet loss inactive hinge and degenerate batch") {
    // D+ = 0, D- = 2, margin 1: hinge max(0-2+1, 0) = 0.
    Matrix emb(4, 1, {0.0f, 0.0f, std::sqrt(2.0f), std::sqrt(2.0f)});
    const std::vector<Label> labels{0, 0, 1, 1};
    const auto out = triplet_loss<float>(emb, labels, 1.0);
    CHECK(out.value == doctest::Approx(0.0));
    for (float g : out.grad_embeddings.storage()) CHECK(g == 0.0f);

    // All embeddings identical: D+ = D- = 0, loss = margin for every anchor.
    Matrix same(4, 3);
    const auto out2 = triplet_loss<float>(same, labels, 1.0);
    CHECK(out2.value == doctest::Approx(1.0));
}

TEST_CASE("mine_triplets matches exhaustive enumeration") {
    Rng rng(61);
    for (int trial = 0; trial < 30; ++trial) {
        const auto b = fd::random_batch(rng, 2 + rng.next_below(2), 2 + rng.next_below(2),
                                        3 + rng.next_below(4));
        const MatrixD dist = pairwise_squared_dist(b.emb);
        const auto mined = mine_triplets(dist, b.labels);
        const std::size_t n = b.emb.rows();
        for (std::size_t i = 0; i < n; ++i) {
            // Exhaustive positive: same class, maximal distance, lowest index tie-break.
            std::ptrdiff_t best_p = -1;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i || b.labels[j] != b.labels[i]) continue;
                if (best_p < 0 || dist(i, j) > dist(i, static_cast<std::size_t>(best_p))) {
                    best_p = static_cast<std::ptrdiff_t>(j);
                }
            }
            std::ptrdiff_t best_n = -1;
            for (std::size_t j = 0; j < n; ++j) {
                if (b.labels[j] == b.labels[i]) continue;
                if (best_n < 0 || dist(i, j) < dist(i, static_cast<std::size_t>(best_n))) {
                    best_n = static_cast<std::ptrdiff_t>(j);
                }
            }
            CHECK(mined.positive[i] == best_p);
            CHECK(mined.negative[i] == best_n);
        }
    }
}

TEST_CASE("mine_triplets tie-break and degenerate anchor") {
    // Two equidistant same-class samples: lowest index wins.
    MatrixD dist(3, 3);
    dist(0, 1) = 1.0;
    dist(1, 0) = 1.0;
    dist(0, 2) = 1.0;
    dist(2, 0) = 1.0;
    dist(1, 2) = 0.5;
    dist(2, 1) = 0.5;
    const auto mined = mine_triplets(dist, {0, 0, 0});
    CHECK(mined.positive[0] == 1);  // ties at D=1 -> lower index
    CHECK(mined.negative[0] == -1);  // no other class

    const auto single = mine_triplets(dist, {0, 1, 1});
    CHECK(single.positive[0] == -1);  // anchor's class has one member
}

TEST_CASE("triplet loss is invariant under within-batch reordering") {
    Rng rng(63);
    for (int trial = 0; trial < 20; ++trial) {
        auto b = fd::random_batch(rng, 3, 2, 5);
        const auto base = triplet_loss<double>(b.emb, b.labels, 1.0);

        const std::size_t n = b.emb.rows();
        std::vector<std::size_t> perm = rng.choose(n, n);
        MatrixD emb2(n, b.emb.cols());
        std::vector<Label> labels2(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < b.emb.cols(); ++j) emb2(i, j) = b.emb(perm[i], j);
            labels2[i] = b.labels[perm[i]];
        }
        const auto permuted = triplet_loss<double>(emb2, labels2, 1.0);
        CHECK(permuted.value == doctest::Approx(base.value).epsilon(1e-9));
    }
}

TEST_CASE("proxynca hand examples") {
    // Two classes; d = 1. D(v, y) = D(v, z) -> loss 0.
    Matrix emb(1, 1, {0.0f});
    ProxyBank bank;
    bank.class_ids = {0, 1};
    bank.proxies = Matrix(2, 1, {1.0f, -1.0f});
    const auto out = proxynca_loss<float>(emb, {0}, bank);
    CHECK(out.value == doctest::Approx(0.0).epsilon(1e-6));

    // D(v, y) = 0.5, D(v, z) = 1.5 -> -log(e^-0.5 / e^-1.5) = -1.
    Matrix emb2(1, 1, {0.0f});
    ProxyBank bank2;
    bank2.class_ids = {0, 1};
    bank2.proxies = Matrix(2, 1, {std::sqrt(0.5f), std::sqrt(1.5f)});
    const auto out2 = proxynca_loss<float>(emb2, {0}, bank2);
    CHECK(out2.value == doctest::Approx(-1.0).epsilon(1e-5));

    // Three classes, hand-set distances, scalar evaluation.
    Matrix emb3(1, 1, {0.0f});
    ProxyBank bank3;
    bank3.class_ids = {0, 1, 2};
    bank3.proxies = Matrix(3, 1, {1.0f, 2.0f, 3.0f});
    const auto out3 = proxynca_loss<float>(emb3, {0}, bank3);
    const double expected = -std::log(std::exp(-1.0) / (std::exp(-4.0) + std::exp(-9.0)));
    CHECK(out3.value == doctest::Approx(expected).epsilon(1e-5));

    ProxyBank missing;
    missing.class_ids = {5, 6};
    missing.proxies = Matrix(2, 1);
    CHECK_THROWS_AS(proxynca_loss<float>(emb, {0}, missing), ConfigError);
}

TEST_CASE("normalized softmax hand examples") {
    // Two proxies with equal similarity -> ln 2.
    Matrix emb(1, 2, {1.0f, 0.0f});
    ProxyBank bank;
    bank.class_ids = {0, 1};
    bank.proxies = Matrix(2, 2, {1.0f, 1.0f, 1.0f, 1.0f});
    const auto out = normalized_softmax_loss<float>(emb, {0}, bank, 0.05);
    CHECK(out.value == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    // Positive sim 1, negative sim 0, tau = 0.05 -> log(1 + e^-20).
    ProxyBank bank2;
    bank2.class_ids = {0, 1};
    bank2.proxies = Matrix(2, 2, {1.0f, 0.0f, 0.0f, 1.0f});
    const auto out2 = normalized_softmax_loss<float>(emb, {0}, bank2, 0.05);
    CHECK(out2.value == doctest::Approx(std::log1p(std::exp(-20.0))));
    CHECK(out2.value >= 0.0);

    // Scaling every embedding by 7 leaves the loss unchanged.
    Matrix scaled = emb;
    for (float& v : scaled.storage()) v *= 7.0f;
    const auto out3 = normalized_softmax_loss<float>(scaled, {0}, bank2, 0.05);
    CHECK(out3.value == doctest::Approx(out2.value).epsilon(1e-6));

    Matrix zero(1, 2);
    CHECK_THROWS_AS(normalized_softmax_loss<float>(zero, {0}, bank2, 0.05),
                    DegenerateInputError);
}

TEST_CASE("normalized softmax is invariant to positive rescaling") {
    Rng rng(67);
    for (int trial = 0; trial < 20; ++trial) {
        auto b = fd::random_batch(rng, 3, 2, 6);
        ProxyBankT<double> bank;
        bank.class_ids = {0, 1, 2};
        bank.proxies = MatrixD(3, 6);
        for (auto& v : bank.proxies.storage()) v = rng.normal();

        const double base = normalized_softmax_loss<double>(b.emb, b.labels, bank, 0.05).value;

        MatrixD emb2 = b.emb;
        const double s = rng.uniform(0.1, 9.0);
        for (std::size_t j = 0; j < emb2.cols(); ++j) emb2(2, j) *= s;
        ProxyBankT<double> bank2 = bank;
        const double s2 = rng.uniform(0.1, 9.0);
        for (std::size_t j = 0; j < 6; ++j) bank2.proxies(1, j) *= s2;

        CHECK(normalized_softmax_loss<double>(emb2, b.labels, bank2, 0.05).value ==
              doctest::Approx(base).epsilon(1e-6));
    }
}

TEST_CASE("group loss symmetric and zero-iteration cases") {
    // Fully symmetric batch: every off-diagonal Pearson similarity equal.
    // Probabilities stay uniform; loss = ln(C) over non-anchors.
    Rng rng(69);
    auto b = fd::random_batch(rng, 2, 3, 8);
    const auto zero_iters = group_loss<double>(b.emb, b.labels, 0);
    CHECK(zero_iters.value == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // Symmetric similarities: duplicate one vector everywhere => pearson 1
    // between all pairs. Support is equal across classes, so uniform stays.
    MatrixD same(4, 6);
    Rng rng2(70);
    std::vector<double> proto(6);
    for (auto& v : proto) v = rng2.normal();
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 6; ++j) same(i, j) = proto[j];
    }
    const auto sym = group_loss<double>(same, {0, 0, 1, 1}, 3);
    CHECK(sym.value == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("group loss matches the step-by-step replicator simulation") {
    Rng rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        auto b = fd::random_batch(rng, 2, 2, 6);
        const auto anchors = default_anchors(b.labels);
        GroupLossDetail<double> detail;
        const auto out = group_loss<double>(b.emb, b.labels, anchors, 3, &detail);
        const auto sim = oracle::simulate_replicator(b.emb, b.labels, anchors, 3);
        CHECK(out.value == doctest::Approx(sim.loss).epsilon(1e-9));
        REQUIRE(detail.assignments.size() == sim.states.size());
        for (std::size_t t = 0; t < sim.states.size(); ++t) {
            for (std::size_t i = 0; i < sim.states[t].size(); ++i) {
                CHECK(detail.assignments[t].storage()[i] ==
                      doctest::Approx(sim.states[t].storage()[i]).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("group loss probability rows stay on the simplex") {
    Rng rng(73);
    for (int trial = 0; trial < 20; ++trial) {
        auto b = fd::random_batch(rng, 2 + rng.next_below(2), 2, 5);
        GroupLossDetail<double> detail;
        group_loss<double>(b.emb, b.labels, default_anchors(b.labels), 4, &detail);
        for (const MatrixD& x : detail.assignments) {
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double sum = 0.0;
                for (std::size_t c = 0; c < x.cols(); ++c) {
                    CHECK(x(i, c) >= 0.0);
                    sum += x(i, c);
                }
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("group loss stabilizes rows with no similarity support") {
    // Row 1 correlates negatively with every other sample, so its clipped
    // similarity row is all zero: the replicator has no signal and the row
    // must keep its previous (uniform) value, counted as stabilized.
    MatrixD emb(4, 2);
    emb(0, 0) = -1.0;
    emb(0, 1) = 1.0;   // class 0 anchor
    emb(1, 0) = 1.0;
    emb(1, 1) = -1.0;  // class 0 non-anchor, anti-correlated with everyone
    emb(2, 0) = -2.0;
    emb(2, 1) = 2.0;   // class 1 anchor
    emb(3, 0) = -0.5;
    emb(3, 1) = 0.5;   // class 1 non-anchor
    const std::vector<Label> labels{0, 0, 1, 1};

    GroupLossDetail<double> detail;
    const auto out = group_loss<double>(emb, labels, default_anchors(labels), 3, &detail);
    CHECK(out.stats.stabilized_denominators == 3);  // one per iteration
    for (const MatrixD& x : detail.assignments) {
        CHECK(x(1, 0) == doctest::Approx(0.5));  // row 1 never moves
        CHECK(x(1, 1) == doctest::Approx(0.5));
        double sum = x(1, 0) + x(1, 1);
        CHECK(sum == doctest::Approx(1.0));
    }
    // Row 1 contributes -log(1/2); row 3 locks onto its class via the
    // anchors' support, so the total stays finite and well-defined.
    CHECK(std::isfinite(out.value));
}

TEST_CASE("group loss error paths") {
    Rng rng(75);
    auto b = fd::random_batch(rng, 2, 2, 5);
    CHECK_THROWS_AS(group_loss<double>(b.emb, b.labels, std::vector<std::size_t>{0}, 3),
                    ConfigError);  // class without an anchor
    CHECK_THROWS_AS(group_loss<double>(b.emb, b.labels, std::vector<std::size_t>{0, 1, 2}, 3),
                    ConfigError);  // duplicate anchor for class 0
}

TEST_CASE("distance matching hand examples") {
    // Identical embeddings -> 0.
    Rng rng(77);
    auto b = fd::random_batch(rng, 2, 2, 5);
    const auto zero = distance_matching_loss<double>(b.emb, b.emb);
    CHECK(zero.value == doctest::Approx(0.0));

    // 2 samples: teacher D = 1.0, student D = 0.4 -> per-anchor loss 0.6.
    Matrix student(2, 1, {0.0f, std::sqrt(0.4f)});
    Matrix teacher(2, 1, {0.0f, 1.0f});
    const auto out = distance_matching_loss<float>(student, teacher);
    CHECK(out.value == doctest::Approx(0.6).epsilon(1e-5));

    Matrix mismatch(3, 1);
    CHECK_THROWS_AS(distance_matching_loss<float>(student, mismatch), DimensionError);
}

TEST_CASE("distance matching is zero iff distance matrices agree") {
    Rng rng(79);
    // Orthogonal transform of the teacher (same d) preserves Eq.-2 distances.
    const std::size_t n = 6, d = 4;
    MatrixD teacher(n, d);
    for (auto& v : teacher.storage()) v = rng.normal();

    // Random rotation via Gram-Schmidt on a random matrix.
    MatrixD q(d, d);
    for (auto& v : q.storage()) v = rng.normal();
    q = oracle::orthonormal_rows(q);
    MatrixD rotated(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += teacher(i, k) * q(j, k);
            rotated(i, j) = acc;
        }
    }
    CHECK(distance_matching_loss<double>(rotated, teacher).value ==
          doctest::Approx(0.0).epsilon(1e-9));

    // Conversely a nonzero loss implies differing distance matrices.
    MatrixD perturbed = rotated;
    perturbed(0, 0) += 0.5;
    const auto out = distance_matching_loss<double>(perturbed, teacher);
    CHECK(out.value > 0.0);
    const MatrixD ds = pairwise_squared_dist(perturbed);
    const MatrixD dt = pairwise_squared_dist(teacher);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(ds.storage()[i] - dt.storage()[i]));
    }
    CHECK(max_diff > 0.0);
}

TEST_CASE("db cluster loss hand examples") {
    // Two classes with sigma = 0.5 each and projected centroids at D = 2.
    // d_s = 1. Centroids at 0 and sqrt(2) (D = 2). Members at distance
    // sqrt(0.5) from their centroid -> sigma = 0.5.
    const float c2 = std::sqrt(2.0f);
    const float off = std::sqrt(0.5f);
    Matrix emb(4, 1, {off, -off, c2 + off, c2 - off});
    const std::vector<Label> labels{0, 0, 1, 1};
    CentroidBank bank;
    bank.class_ids = {0, 1};
    bank.centroids = Matrix(2, 1, {0.0f, c2});  // teacher dim 1
    bank.projection = Matrix(1, 1, {1.0f});     // identity projection
    const auto out = db_cluster_loss<float>(emb, labels, bank);
    CHECK(out.value == doctest::Approx(0.5).epsilon(1e-5));

    // Members exactly on distinct centroids -> 0.
    Matrix on_centroid(4, 1, {0.0f, 0.0f, c2, c2});
    const auto out2 = db_cluster_loss<float>(on_centroid, labels, bank);
    CHECK(out2.value == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("db cluster loss equals an independent Davies-Bouldin computation") {
    Rng rng(83);
    for (int trial = 0; trial < 20; ++trial) {
        auto b = fd::random_batch(rng, 3, 3, 4);
        CentroidBankT<double> bank;
        bank.class_ids = {0, 1, 2};
        bank.centroids = MatrixD(3, 7);
        for (auto& v : bank.centroids.storage()) v = rng.normal();
        bank.projection = MatrixD(4, 7);
        for (auto& v : bank.projection.storage()) v = 0.5 * rng.normal();

        const auto out = db_cluster_loss<double>(b.emb, b.labels, bank);

        // Independent: project centroids, compute sigma and the max-ratio
        // score per class, then average.
        MatrixD proj(3, 4);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t r = 0; r < 4; ++r) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 7; ++k) {
                    acc += bank.projection(r, k) * bank.centroids(c, k);
                }
                proj(c, r) = acc;
            }
        }
        std::vector<double> sigma(3, 0.0);
        for (std::size_t c = 0; c < 3; ++c) {
            double acc = 0.0;
            int count = 0;
            for (std::size_t i = 0; i < b.emb.rows(); ++i) {
                if (b.labels[i] != static_cast<Label>(c)) continue;
                double dist = 0.0;
                for (std::size_t k = 0; k < 4; ++k) {
                    const double diff = b.emb(i, k) - proj(c, k);
                    dist += diff * diff;
                }
                acc += dist / 4.0;
                ++count;
            }
            sigma[c] = acc / count;
        }
        double total = 0.0;
        for (std::size_t a = 0; a < 3; ++a) {
            double best = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                if (c == a) continue;
                double dist = 0.0;
                for (std::size_t k = 0; k < 4; ++k) {
                    const double diff = proj(a, k) - proj(c, k);
                    dist += diff * diff;
                }
                dist /= 4.0;
                best = std::max(best, (sigma[a] + sigma[c]) / (dist + 1e-8));
            }
            total += best;
        }
        total /= 3.0;
        CHECK(out.value == doctest::Approx(total).epsilon(1e-9));
    }
}

TEST_CASE("db cluster loss error paths") {
    Matrix emb(2, 2);
    CentroidBank bank;
    bank.class_ids = {0};
    bank.centroids = Matrix(1, 2);
    bank.projection = Matrix(2, 2);
    CHECK_THROWS_AS(db_cluster_loss<float>(emb, {0, 0}, bank), ConfigError);  // one class
}

TEST_CASE("loss gradients match finite differences (sampled)") {
    CHECK(fd::trials_triplet(20, 901).max_rel_error < 1e-4);
    CHECK(fd::trials_proxynca(20, 902).max_rel_error < 1e-4);
    CHECK(fd::trials_normalized_softmax(20, 903).max_rel_error < 1e-4);
    CHECK(fd::trials_group(20, 904).max_rel_error < 1e-4);
    CHECK(fd::trials_distance_match(20, 905).max_rel_error < 1e-4);
    CHECK(fd::trials_db_cluster(20, 906).max_rel_error < 1e-4);
}
