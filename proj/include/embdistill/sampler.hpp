#ifndef EMBDISTILL_SAMPLER_HPP
#define EMBDISTILL_SAMPLER_HPP

#include <cstdint>
#include <vector>

#include "embdistill/dataset.hpp"

namespace embd {

// P classes per batch, K samples per class.
struct BatchSpec {
    std::size_t classes_per_batch = 16;  // P
    std::size_t samples_per_class = 4;   // K
    std::uint64_t seed = 1;

    void validate() const {
        if (classes_per_batch < 2) throw ConfigError("batch spec: P must be >= 2");
        if (samples_per_class < 2) throw ConfigError("batch spec: K must be >= 2");
    }
};

struct BatchCursor {
    std::uint64_t epoch = 0;
    std::uint64_t batch = 0;
};

// Cliques usable for training batches: labeled, >= 2 members, row indices in
// row order. Noise items never appear here.
std::vector<std::vector<std::size_t>> eligible_cliques(const EmbeddingSet& set);

// P*K row indices grouped by class slot. Cliques rotate through a per-epoch
// shuffled order (each epoch covers all eligible cliques); members are drawn
// without replacement unless a clique has fewer than K members. Deterministic
// given (spec.seed, cursor).
std::vector<std::size_t> sample_batch(const EmbeddingSet& set, const BatchSpec& spec,
                                      const BatchCursor& cursor);

// Batches needed so one epoch's rotation visits every eligible clique.
std::size_t batches_per_epoch(const EmbeddingSet& set, const BatchSpec& spec);

}  // namespace embd

#endif
