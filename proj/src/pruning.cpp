#include "embdistill/pruning.hpp"

#include <algorithm>
#include <cmath>

#include "embdistill/rng.hpp"
#include "json.hpp"

namespace embd {

std::size_t PruneState::active_count() const {
    std::size_t n = 0;
    for (std::uint8_t a : active) n += a ? 1 : 0;
    return n;
}

std::vector<std::size_t> PruneState::active_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < active.size(); ++i) {
        if (active[i]) rows.push_back(i);
    }
    return rows;
}

PruneState make_prune_state(const ProjectionHead& initial_head) {
    PruneState s;
    s.W_init = initial_head.W;
    s.b_init = initial_head.b;
    s.active.assign(initial_head.d_out(), 1);
    s.iteration = 0;
    return s;
}

std::vector<std::size_t> rank_rows(const Matrix& W, const std::vector<std::uint8_t>& mask) {
    if (mask.size() != W.rows()) throw DimensionError("rank_rows: mask length != row count");
    std::vector<std::size_t> rows;
    std::vector<double> mean_abs(W.rows(), 0.0);
    for (std::size_t i = 0; i < W.rows(); ++i) {
        if (!mask[i]) continue;
        rows.push_back(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < W.cols(); ++j) acc += std::abs(static_cast<double>(W(i, j)));
        mean_abs[i] = acc / static_cast<double>(W.cols());
    }
    if (rows.size() < 2) throw StateError("rank_rows: need at least 2 active rows");
    std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        if (mean_abs[a] != mean_abs[b]) return mean_abs[a] > mean_abs[b];
        return a < b;
    });
    return rows;
}

Matrix prune_step(PruneState& state, const Matrix& retrained_W) {
    if (!retrained_W.same_shape(state.W_init)) {
        throw DimensionError("prune_step: retrained weights shape mismatch");
    }
    const std::size_t n_active = state.active_count();
    if (n_active < 2) throw StateError("prune_step: fewer than 2 active rows, cannot prune");

    const std::vector<std::size_t> ranked = rank_rows(retrained_W, state.active);
    const std::size_t keep = n_active / 2;  // bottom ceil(n/2) rows are zeroed

    std::vector<std::uint8_t> next(state.active.size(), 0);
    for (std::size_t i = 0; i < keep; ++i) next[ranked[i]] = 1;
    state.active = std::move(next);
    state.iteration += 1;

    Matrix live(state.W_init.rows(), state.W_init.cols());
    for (std::size_t i = 0; i < live.rows(); ++i) {
        if (!state.active[i]) continue;  // pruned rows stay zero
        std::copy_n(state.W_init.row(i).data(), live.cols(), live.row(i).data());
    }
    return live;
}

ProjectionHead compact_head(const ProjectionHead& full, const std::vector<std::uint8_t>& mask) {
    if (mask.size() != full.d_out()) throw DimensionError("compact_head: mask length != d_out");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) rows.push_back(i);
    }
    ProjectionHead out;
    out.W = Matrix(rows.size(), full.d_in());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(full.W.row(rows[i]).data(), full.d_in(), out.W.row(i).data());
    }
    if (!full.b.empty()) {
        out.b.resize(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) out.b[i] = full.b[rows[i]];
    }
    out.bn.momentum = full.bn.momentum;
    out.bn.eps = full.bn.eps;
    out.bn.mode = full.bn.mode;
    out.bn.gamma.resize(rows.size());
    out.bn.beta.resize(rows.size());
    out.bn.running_mean.resize(rows.size());
    out.bn.running_var.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.bn.gamma[i] = full.bn.gamma[rows[i]];
        out.bn.beta[i] = full.bn.beta[rows[i]];
        out.bn.running_mean[i] = full.bn.running_mean[rows[i]];
        out.bn.running_var[i] = full.bn.running_var[rows[i]];
    }
    return out;
}

Matrix masked_embed(const ProjectionHead& head, const std::vector<std::uint8_t>& mask,
                    const Matrix& X) {
    return head_embed(compact_head(head, mask), X);
}

PruneLoopResult run_prune_loop(const EmbeddingSet& train_set, const EmbeddingSet& val_set,
                               const PruneConfig& cfg) {
    if (cfg.initial_dim < 2) throw ConfigError("prune: initial_dim must be >= 2");
    if (cfg.early_stop_delta < 0.0) throw ConfigError("prune: early_stop_delta must be >= 0");

    const ProjectionHead head0 = make_head(cfg.initial_dim, train_set.dim(),
                                           cfg.retrain.head_bias, HeadInit::kaiming,
                                           mix_seed(cfg.seed, 0x7072756eULL));
    PruneLoopResult out;
    out.state = make_prune_state(head0);
    Matrix w_live = head0.W;

    double map_iter0 = 0.0;
    for (int m = 0; m < cfg.max_iterations; ++m) {
        const std::vector<std::size_t> rows = out.state.active_rows();

        // Retrain from the rewound weights at the compacted width.
        ProjectionHead full = head0;
        full.W = w_live;
        full.b = out.state.b_init;
        ProjectionHead compact = compact_head(full, out.state.active);

        TrainConfig rcfg = cfg.retrain;
        rcfg.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(m) + 1);
        rcfg.target_dim = rows.size();
        TrainResult tr = train(compact, train_set, val_set, rcfg);

        PruneIteration it;
        it.iteration = m;
        it.kept_dims = rows.size();
        it.best = tr.best;
        out.iterations.push_back(it);
        out.state.history.push_back({m, rows.size(), tr.best.val_map});
        if (m == 0) map_iter0 = tr.best.val_map;

        if (m > 0 && tr.best.val_map < map_iter0 - cfg.early_stop_delta) {
            out.early_stopped = true;
            break;
        }
        if (out.state.active_count() < 2) break;

        // Scatter the retrained rows back to full size for ranking.
        Matrix trained_full(head0.W.rows(), head0.W.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy_n(tr.best.head.W.row(i).data(), trained_full.cols(),
                        trained_full.row(rows[i]).data());
        }
        w_live = prune_step(out.state, trained_full);
    }
    return out;
}

std::string prune_report_json(const PruneState& state) {
    nlohmann::json j = nlohmann::json::array();
    for (const PruneRecord& r : state.history) {
        j.push_back({{"iteration", r.iteration}, {"kept_dims", r.kept_dims}, {"val_map", r.val_map}});
    }
    return j.dump(2);
}

}  // namespace embd
