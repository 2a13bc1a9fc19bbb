#include <cmath>

#include "doctest.h"
#include "embdistill/pruning.hpp"
#include "embdistill/rng.hpp"
#include "embdistill/synth.hpp"

using namespace embd;

namespace {

Matrix row_means_matrix(const std::vector<float>& means, std::size_t cols) {
    Matrix m(means.size(), cols);
    for (std::size_t i = 0; i < means.size(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = means[i];
    }
    return m;
}

}  // namespace

TEST_CASE("rank_rows orders by mean absolute value with index tie-break") {
    const Matrix W = row_means_matrix({0.9f, 0.1f, 0.5f, 0.3f}, 4);
    const std::vector<std::uint8_t> mask{1, 1, 1, 1};
    CHECK(rank_rows(W, mask) == std::vector<std::size_t>{0, 2, 3, 1});

    // Identical rows: lower index first.
    const Matrix tied = row_means_matrix({0.5f, 0.5f, 0.1f}, 3);
    CHECK(rank_rows(tied, {1, 1, 1}) == std::vector<std::size_t>{0, 1, 2});

    // Two active rows: ordered by magnitude.
    CHECK(rank_rows(W, {0, 1, 0, 1}) == std::vector<std::size_t>{3, 1});

    CHECK_THROWS_AS(rank_rows(W, std::vector<std::uint8_t>{0, 0, 0, 1}), StateError);
}

TEST_CASE("prune_step zeroes the bottom half and rewinds survivors") {
    Rng rng(201);
    ProjectionHead head = make_head(4, 3, true, HeadInit::kaiming, 7);
    PruneState state = make_prune_state(head);

    // Retrained weights with known row magnitudes 0.9, 0.1, 0.5, 0.3.
    const Matrix retrained = row_means_matrix({0.9f, 0.1f, 0.5f, 0.3f}, 3);
    const Matrix live = prune_step(state, retrained);

    CHECK(state.iteration == 1);
    CHECK(state.active == std::vector<std::uint8_t>{1, 0, 1, 0});
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(live(0, j) == head.W(0, j));  // survivors bit-match Iteration 0
        CHECK(live(2, j) == head.W(2, j));
        CHECK(live(1, j) == 0.0f);
        CHECK(live(3, j) == 0.0f);
    }
}

TEST_CASE("two prune steps leave 2 of 8 rows and masks stay monotone") {
    ProjectionHead head = make_head(8, 4, true, HeadInit::kaiming, 9);
    PruneState state = make_prune_state(head);

    Rng rng(203);
    Matrix retrained(8, 4);
    for (auto& v : retrained.storage()) v = static_cast<float>(rng.normal());
    const auto mask0 = state.active;
    const Matrix live1 = prune_step(state, retrained);
    const auto mask1 = state.active;
    CHECK(state.active_count() == 4);

    Matrix retrained2 = live1;
    for (std::size_t i = 0; i < 8; ++i) {
        if (!mask1[i]) continue;
        for (std::size_t j = 0; j < 4; ++j) {
            retrained2(i, j) += static_cast<float>(0.1 * rng.normal());
        }
    }
    const Matrix live2 = prune_step(state, retrained2);
    CHECK(state.active_count() == 2);

    // Monotone: active set shrinks, zeroed rows stay zero.
    for (std::size_t i = 0; i < 8; ++i) {
        if (state.active[i]) {
            CHECK(mask1[i] == 1);
            CHECK(mask0[i] == 1);
        }
        if (!mask1[i]) {
            for (std::size_t j = 0; j < 4; ++j) CHECK(live2(i, j) == 0.0f);
        }
    }

    // A third step from 2 active rows leaves 1; from 1 it must throw.
    const Matrix live3 = prune_step(state, live2);
    (void)live3;
    CHECK(state.active_count() == 1);
    CHECK_THROWS_AS(prune_step(state, live2), StateError);
}

TEST_CASE("rewind is exact when retrained weights equal the snapshot") {
    ProjectionHead head = make_head(4, 5, true, HeadInit::kaiming, 11);
    PruneState state = make_prune_state(head);
    const Matrix live = prune_step(state, head.W);
    for (std::size_t i = 0; i < 4; ++i) {
        if (!state.active[i]) continue;
        for (std::size_t j = 0; j < 5; ++j) CHECK(live(i, j) == head.W(i, j));
    }
}

TEST_CASE("odd active counts zero out the ceil half") {
    ProjectionHead head = make_head(5, 2, true, HeadInit::kaiming, 13);
    PruneState state = make_prune_state(head);
    Matrix retrained = row_means_matrix({0.5f, 0.4f, 0.3f, 0.2f, 0.1f}, 2);
    prune_step(state, retrained);
    CHECK(state.active_count() == 2);  // floor(5/2)
}

TEST_CASE("masked_embed matches the full forward restricted to active rows") {
    Rng rng(205);
    ProjectionHead head = make_head(6, 4, true, HeadInit::kaiming, 15);
    for (auto& v : head.bn.running_mean) v = static_cast<float>(0.2 * rng.normal());
    for (auto& v : head.bn.running_var) v = static_cast<float>(1.0 + 0.1 * rng.normal());
    for (auto& v : head.bn.gamma) v = static_cast<float>(1.0 + 0.2 * rng.normal());
    for (auto& v : head.bn.beta) v = static_cast<float>(0.1 * rng.normal());

    Matrix X(5, 4);
    for (auto& v : X.storage()) v = static_cast<float>(rng.normal());

    const std::vector<std::uint8_t> full(6, 1);
    const Matrix all = masked_embed(head, full, X);
    const Matrix direct = head_embed(head, X);
    CHECK(all.storage() == direct.storage());

    const std::vector<std::uint8_t> half{1, 0, 1, 0, 1, 0};
    const Matrix compact = masked_embed(head, half, X);
    CHECK(compact.cols() == 3);
    // Row-selection oracle: compacted output equals the matching columns of
    // the full eval-mode forward.
    const std::size_t selected[3] = {0, 2, 4};
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(compact(i, j) == direct(i, selected[j]));
        }
    }

    const Matrix empty = masked_embed(head, half, Matrix(0, 4));
    CHECK(empty.rows() == 0);
    CHECK(empty.cols() == 3);
}

TEST_CASE("compacted distances equal zero-padded distances after rescaling") {
    Rng rng(207);
    ProjectionHead head = make_head(8, 5, true, HeadInit::kaiming, 17);
    Matrix X(6, 5);
    for (auto& v : X.storage()) v = static_cast<float>(rng.normal());

    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0, 1, 0};
    const Matrix compact = masked_embed(head, mask, X);

    // Zero-padded embedding: full output with pruned dims forced to zero.
    const Matrix full = head_embed(head, X);
    Matrix padded(6, 8);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 8; ++j) padded(i, j) = mask[j] ? full(i, j) : 0.0f;
    }

    const double d_full = 8.0, d_active = 4.0;
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = i + 1; j < 6; ++j) {
            const double dc = squared_dist(compact.row(i), compact.row(j));
            const double dp = squared_dist(padded.row(i), padded.row(j));
            CHECK(dc == doctest::Approx(dp * d_full / d_active).epsilon(1e-6));
        }
    }
}

TEST_CASE("prune loop records history and halves dimensions") {
    SynthConfig dcfg = SynthConfig::separable(31);
    dcfg.num_cliques = 12;
    dcfg.num_val_cliques = 6;
    dcfg.teacher_dim = 24;
    const SynthResult data = generate_synthetic(dcfg);

    PruneConfig cfg;
    cfg.initial_dim = 8;
    cfg.retrain.loss = LossKind::triplet;
    cfg.retrain.epochs = 2;
    cfg.retrain.lr_milestones = {};
    cfg.retrain.lr = 1e-3;
    cfg.retrain.batch.classes_per_batch = 6;
    cfg.retrain.batch.samples_per_class = 3;
    cfg.early_stop_delta = 1.0;  // never trip in this test
    cfg.max_iterations = 3;
    cfg.seed = 3;

    const PruneLoopResult r = run_prune_loop(data.train, data.val, cfg);
    REQUIRE(r.state.history.size() == 3);
    CHECK(r.state.history[0].kept_dims == 8);
    CHECK(r.state.history[1].kept_dims == 4);
    CHECK(r.state.history[2].kept_dims == 2);
    const std::string json = prune_report_json(r.state);
    CHECK(json.find("\"kept_dims\": 8") != std::string::npos);
    CHECK(json.find("val_map") != std::string::npos);
}
