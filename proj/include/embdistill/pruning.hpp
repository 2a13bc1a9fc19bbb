#ifndef EMBDISTILL_PRUNING_HPP
#define EMBDISTILL_PRUNING_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "embdistill/trainer.hpp"

namespace embd {

struct PruneRecord {
    int iteration = 0;
    std::size_t kept_dims = 0;
    double val_map = 0.0;
};

// Iterative magnitude pruning of the head's output rows with rewind to the
// Iteration-0 weights. Mask shrinks by half (floor) per iteration and pruned
// rows stay zero forever.
struct PruneState {
    Matrix W_init;               // snapshot at Iteration 0
    std::vector<float> b_init;   // snapshot at Iteration 0
    std::vector<std::uint8_t> active;
    int iteration = 0;
    std::vector<PruneRecord> history;

    std::size_t active_count() const;
    std::vector<std::size_t> active_rows() const;
};

PruneState make_prune_state(const ProjectionHead& initial_head);

// Active rows ordered by mean absolute weight, descending; ties break toward
// the lower index.
std::vector<std::size_t> rank_rows(const Matrix& W, const std::vector<std::uint8_t>& mask);

// Ends one iteration: the bottom half of the active rows (by rank_rows on the
// retrained weights) leaves the mask; survivors rewind to their Iteration-0
// values. Returns the rewound live weight matrix for the next retraining.
Matrix prune_step(PruneState& state, const Matrix& retrained_W);

// Embeddings with pruned dimensions removed (output dim = active row count).
Matrix masked_embed(const ProjectionHead& head, const std::vector<std::uint8_t>& mask,
                    const Matrix& X);

// Head restricted to the active rows (weights, bias, batch-norm features).
ProjectionHead compact_head(const ProjectionHead& full, const std::vector<std::uint8_t>& mask);

struct PruneConfig {
    std::size_t initial_dim = 32;
    TrainConfig retrain;             // per-iteration retraining budget
    double early_stop_delta = 0.05;  // halt when val MAP drops this far below Iteration 0
    int max_iterations = 16;
    std::uint64_t seed = 1;
};

struct PruneIteration {
    int iteration = 0;
    std::size_t kept_dims = 0;
    Checkpoint best;  // compacted head for this iteration
};

struct PruneLoopResult {
    PruneState state;
    std::vector<PruneIteration> iterations;
    bool early_stopped = false;
};

PruneLoopResult run_prune_loop(const EmbeddingSet& train_set, const EmbeddingSet& val_set,
                               const PruneConfig& cfg);

std::string prune_report_json(const PruneState& state);

}  // namespace embd

#endif
