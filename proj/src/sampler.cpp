#include "embdistill/sampler.hpp"

#include <numeric>

#include "embdistill/rng.hpp"

namespace embd {

std::vector<std::vector<std::size_t>> eligible_cliques(const EmbeddingSet& set) {
    std::vector<std::vector<std::size_t>> out;
    for (auto& [label, rows] : set.cliques()) {
        if (rows.size() >= 2) out.push_back(rows);
    }
    return out;
}

std::size_t batches_per_epoch(const EmbeddingSet& set, const BatchSpec& spec) {
    spec.validate();
    const std::size_t e = eligible_cliques(set).size();
    if (e < spec.classes_per_batch) {
        throw SamplingError("need at least P=" + std::to_string(spec.classes_per_batch) +
                            " cliques with >= 2 members, have " + std::to_string(e));
    }
    return (e + spec.classes_per_batch - 1) / spec.classes_per_batch;
}

std::vector<std::size_t> sample_batch(const EmbeddingSet& set, const BatchSpec& spec,
                                      const BatchCursor& cursor) {
    spec.validate();
    const auto cliques = eligible_cliques(set);
    const std::size_t E = cliques.size();
    const std::size_t P = spec.classes_per_batch;
    const std::size_t K = spec.samples_per_class;
    if (E < P) {
        throw SamplingError("need at least P=" + std::to_string(P) +
                            " cliques with >= 2 members, have " + std::to_string(E));
    }

    // Per-epoch clique order; consecutive batches walk it cyclically so every
    // clique is visited each epoch.
    std::vector<std::size_t> order(E);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng epoch_rng(mix_seed(spec.seed, cursor.epoch));
    epoch_rng.shuffle(order);

    Rng member_rng(mix_seed(mix_seed(spec.seed, cursor.epoch), cursor.batch + 0x626174ULL));

    std::vector<std::size_t> batch;
    batch.reserve(P * K);
    const std::size_t start = (cursor.batch * P) % E;
    for (std::size_t slot = 0; slot < P; ++slot) {
        const std::vector<std::size_t>& members = cliques[order[(start + slot) % E]];
        if (members.size() >= K) {
            for (std::size_t pick : member_rng.choose(members.size(), K)) {
                batch.push_back(members[pick]);
            }
        } else {
            // Too few members: sample with replacement.
            for (std::size_t k = 0; k < K; ++k) {
                batch.push_back(members[member_rng.next_below(members.size())]);
            }
        }
    }
    return batch;
}

}  // namespace embd
